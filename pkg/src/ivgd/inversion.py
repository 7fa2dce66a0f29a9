"""Inverting ``P = G o F`` by two fixed-point loops.

``G(zeta) = Y`` is solved by ``zeta <- 2 Y - g(zeta)`` starting from ``Y``;
``F(z) = zeta`` by ``z <- 2 zeta - f(z)`` starting from ``zeta``.  Both loops
are Banach iterations and converge whenever the certified Lipschitz constant
of the residual branch is below one.  Iterates are not clamped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvertibilityError, NumericError

DIVERGENCE_PATIENCE = 3


@dataclass
class OperatorPair:
    """Bare ``f``/``g`` callables with certificates, e.g. analytic test operators."""

    f: object
    g: object
    cert_f: object = None
    cert_g: object = None


@dataclass
class LoopResult:
    value: np.ndarray
    iters: int
    residual: float
    converged: bool
    gaps: list = field(default_factory=list)
    gaps_max: list = field(default_factory=list)


@dataclass
class InversionReport:
    z: np.ndarray
    zeta: np.ndarray
    iters_g: int
    iters_f: int
    residual_g: float
    residual_f: float
    converged: bool
    gaps_g: list = field(default_factory=list)
    gaps_f: list = field(default_factory=list)


def _require(cert, name):
    if cert is None:
        raise InvertibilityError(f"no Lipschitz certificate for {name}")
    est = cert.estimate if hasattr(cert, "estimate") else float(cert)
    if not est < 1.0:
        raise InvertibilityError(f"certified Lipschitz constant of {name} is {est:.6g} >= 1")


def fixed_point(op, target, m=20, tol=1e-6):
    """Iterate ``v <- 2 target - op(v)`` from ``v = target``.

    Stops after ``m`` iterations or once successive iterates differ by at most
    ``tol`` in the max-norm.  ``gaps`` records the 2-norm of each step (the
    largest over a batch), ``gaps_max`` the max-norm.
    """
    target = np.asarray(target, dtype=np.float64)
    v = target.copy()
    gaps, gaps_max = [], []
    rising = 0
    residual = float("inf")
    converged = False
    it = 0
    for it in range(1, m + 1):
        new = 2.0 * target - op(v)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite iterate at iteration {it}")
        step = new - v
        g2 = float(np.max(np.linalg.norm(step, axis=-1)))
        gm = float(np.max(np.abs(step))) if step.size else 0.0
        v = new
        if gaps and g2 > gaps[-1] and gm > tol:
            rising += 1
            if rising >= DIVERGENCE_PATIENCE:
                raise NumericError(f"fixed-point iteration diverging (iteration {it})")
        else:
            rising = 0
        gaps.append(g2)
        gaps_max.append(gm)
        residual = gm
        if gm <= tol:
            converged = True
            break
    return LoopResult(v, it if m > 0 else 0, residual, converged, gaps, gaps_max)


def invert_label_propagation(model, y, m=20, tol=1e-6, require_certificate=True, detail=False):
    if require_certificate:
        _require(model.cert_g, "g")
    res = fixed_point(model.g, y, m, tol)
    return res if detail else res.value


def invert_feature_construction(model, zeta, m=20, tol=1e-6, require_certificate=True, detail=False):
    if require_certificate:
        _require(model.cert_f, "f")
    res = fixed_point(model.f, zeta, m, tol)
    return res if detail else res.value


def invert_p(model, y, m=20, tol=1e-6, require_certificate=True):
    """Estimate sources ``z`` with ``P(z) ~= y``."""
    if require_certificate:
        _require(model.cert_g, "g")
        _require(model.cert_f, "f")
    lg = fixed_point(model.g, y, m, tol)
    lf = fixed_point(model.f, lg.value, m, tol)
    return InversionReport(
        z=lf.value,
        zeta=lg.value,
        iters_g=lg.iters,
        iters_f=lf.iters,
        residual_g=lg.residual,
        residual_f=lf.residual,
        converged=lg.converged and lf.converged,
        gaps_g=lg.gaps,
        gaps_f=lf.gaps,
    )
