"""Error compensation and validity-aware layers on top of the inverted model.

Pipeline for one observation ``y``::

    z   = P^{-1}(y)                         (fixed-point inversion)
    x^0 = clamp(z + Q(z), 0, 1)             (compensation)
    x^{k+1}, lam^{k+1} = layer_k(x^k, lam^k) for k < K
    scores = clamp(x^K, 0, 1); labels = scores >= threshold

Each layer minimises the linearised augmented Lagrangian

    h(x) = tau/2 ||x - C(x^k)||^2 + gamma a.(x - x^k) + alpha/2 ||x - x^k||^2,
    gamma = lam^k + rho (a.x^k - b),

in closed form and then takes a dual ascent step on ``lam``.  The constraint
``a.x = b`` is only active when ``b`` (the number of sources) is supplied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import FormatError, NumericError, TrainingError, ValidationError
from .graph import ConstraintSpec, spectral_radius_ata
from .inversion import invert_p
from .optim import OptimizerState, ParamSet, step

TAU0, ALPHA0, RHO0 = 10.0, 1.0, 1e-3
MARGIN_EPS = 1e-12


def softplus(s):
    return np.logaddexp(0.0, s)


def softplus_inv(v):
    v = float(v)
    if v <= 0:
        raise ValidationError("softplus inverse needs a positive value")
    return v + np.log(-np.expm1(-v))


def sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def clamp01(x):
    return np.clip(x, 0.0, 1.0)


def clamp_grad(x):
    """Derivative convention: 1 on the closed interval [0, 1], 0 outside."""
    return ((x >= 0.0) & (x <= 1.0)).astype(np.float64)


# --------------------------------------------------------------------------
# compensation network


class CompensationNet:
    """``C(z) = clamp(z + Q(z))`` with ``Q`` an n -> h -> h -> n tanh MLP.

    The weights live in a shared :class:`ParamSet` under ``prefix``.
    """

    names = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, params, prefix="comp."):
        self.params = params
        self.prefix = prefix

    @classmethod
    def add_to(cls, params, prefix, n, hidden, rng, out_scale=0.1):
        params.add(prefix + "W1", rng.standard_normal((hidden, n)) / np.sqrt(n))
        params.add(prefix + "b1", np.zeros(hidden))
        params.add(prefix + "W2", rng.standard_normal((hidden, hidden)) / np.sqrt(hidden))
        params.add(prefix + "b2", np.zeros(hidden))
        params.add(prefix + "W3", out_scale * rng.standard_normal((n, hidden)) / np.sqrt(hidden))
        params.add(prefix + "b3", np.zeros(n))
        return cls(params, prefix)

    def _p(self, name):
        return self.params.values[self.prefix + name]

    def _g(self, name):
        return self.params.grads[self.prefix + name]

    @property
    def hidden(self):
        return self._p("W1").shape[0]

    def q(self, z):
        h1 = np.tanh(z @ self._p("W1").T + self._p("b1"))
        h2 = np.tanh(h1 @ self._p("W2").T + self._p("b2"))
        return h2 @ self._p("W3").T + self._p("b3"), (z, h1, h2)

    def q_backward(self, cache, g_out):
        z, h1, h2 = cache
        g2 = g_out.reshape(-1, g_out.shape[-1])
        H2 = h2.reshape(-1, h2.shape[-1])
        H1 = h1.reshape(-1, h1.shape[-1])
        Z = z.reshape(-1, z.shape[-1])
        self._g("b3")[...] += g2.sum(axis=0)
        self._g("W3")[...] += g2.T @ H2
        a2 = (g2 @ self._p("W3")) * (1.0 - H2 * H2)
        self._g("b2")[...] += a2.sum(axis=0)
        self._g("W2")[...] += a2.T @ H1
        a1 = (a2 @ self._p("W2")) * (1.0 - H1 * H1)
        self._g("b1")[...] += a1.sum(axis=0)
        self._g("W1")[...] += a1.T @ Z
        return (a1 @ self._p("W1")).reshape(z.shape)

    def forward(self, z):
        qz, cache = self.q(z)
        pre = z + qz
        return clamp01(pre), (cache, pre)

    def backward(self, cache, g_x):
        qcache, pre = cache
        g_pre = g_x * clamp_grad(pre)
        return g_pre + self.q_backward(qcache, g_pre)

    def __call__(self, z):
        return self.forward(np.asarray(z, dtype=np.float64))[0]

    def zero_out(self):
        for name in self.names:
            self._p(name)[...] = 0.0


def compensate(c, z):
    return c(z)


# --------------------------------------------------------------------------
# validity-aware layers


class ValidityLayer:
    """Positive ``rho, tau, alpha`` stored as softplus pre-activations."""

    def __init__(self, params, index, comp):
        self.params = params
        self.prefix = f"layer{index}."
        self.comp = comp

    @classmethod
    def add_to(cls, params, index, comp, rho=RHO0, tau=TAU0, alpha=ALPHA0):
        pre = f"layer{index}."
        params.add(pre + "s_rho", softplus_inv(rho))
        params.add(pre + "s_tau", softplus_inv(tau))
        params.add(pre + "s_alpha", softplus_inv(alpha))
        return cls(params, index, comp)

    def _s(self, name):
        return float(self.params.values[self.prefix + name])

    @property
    def rho(self):
        return float(softplus(self._s("s_rho")))

    @property
    def tau(self):
        return float(softplus(self._s("s_tau")))

    @property
    def alpha(self):
        return float(softplus(self._s("s_alpha")))

    def set(self, rho=None, tau=None, alpha=None):
        for name, v in (("s_rho", rho), ("s_tau", tau), ("s_alpha", alpha)):
            if v is not None:
                self.params.values[self.prefix + name][...] = softplus_inv(v)


def layer_update(x, lam, c, rho, tau, alpha, a=None, b=None):
    """Closed-form minimiser of ``h`` followed by the dual step.

    ``a``/``b`` absent means the constraint is inactive: ``gamma = 0`` and
    ``lam`` is passed through.  ``b`` may be a scalar or one value per row.
    """
    denom = tau + alpha
    if not denom > 1e-300:
        raise NumericError("tau + alpha underflow")
    if a is None or b is None:
        return (tau * c + alpha * x) / denom, lam
    gamma = lam + rho * (x @ a - b)
    x_new = (tau * c + alpha * x - gamma[..., None] * a) / denom
    return x_new, lam + rho * (x_new @ a - b)


def layer_forward(layer, x, lam, cs=None, active=False, b=None):
    x = np.asarray(x, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    c = layer.comp(x)
    if active:
        if cs is None:
            raise ValidationError("active constraint needs a ConstraintSpec")
        return layer_update(x, lam, c, layer.rho, layer.tau, layer.alpha, cs.a, cs.b if b is None else b)
    return layer_update(x, lam, c, layer.rho, layer.tau, layer.alpha)


def surrogate_objective(x, x_k, lam, c, rho, tau, alpha, a=None, b=None):
    """The quadratic ``h`` minimised by one layer (used by tests and diagnostics)."""
    gamma = 0.0 if a is None else lam + rho * (x_k @ a - b)
    lin = 0.0 if a is None else gamma * (a @ (x - x_k))
    return 0.5 * tau * np.sum((x - c) ** 2) + lin + 0.5 * alpha * np.sum((x - x_k) ** 2)


# --------------------------------------------------------------------------
# model


@dataclass
class LayerTrace:
    x: np.ndarray            # (K+1, ..., n)
    lam: np.ndarray          # (K+1, ...)
    residual: np.ndarray | None  # (K+1, ...) |a.x - b|, None without a constraint
    step_norm: np.ndarray    # (K, ...) ||u^{k+1} - u^k||^2_M


@dataclass
class InferenceResult:
    scores: np.ndarray
    labels: np.ndarray
    z: np.ndarray
    trace: LayerTrace


class IVGDModel:
    def __init__(self, diffusion, n, K=10, hidden=64, tied=True, seed=0, threshold=0.5,
                 use_inversion=True, use_compensation=True, inversion_m=20, inversion_tol=1e-6,
                 constraint=None, rho=RHO0, tau=TAU0, alpha=ALPHA0, params=None):
        if K < 0:
            raise ValidationError("K must be >= 0")
        self.diffusion = diffusion
        self.n = n
        self.K = K
        self.hidden = hidden
        self.tied = tied
        self.seed = seed
        self.threshold = threshold
        self.use_inversion = use_inversion
        self.use_compensation = use_compensation
        self.inversion_m = inversion_m
        self.inversion_tol = inversion_tol
        self.constraint = constraint or ConstraintSpec.source_count(n)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
        fresh = params is None
        self.params = params if params is not None else ParamSet()

        def make(prefix):
            if fresh:
                return CompensationNet.add_to(self.params, prefix, n, hidden, rng)
            return CompensationNet(self.params, prefix)

        # ``comp`` corrects the raw inversion output z; the layers' C^k act on
        # iterates that already live in [0, 1] and get their own net(s).
        self.comp = make("comp.")
        shared = make("layer_comp.") if tied and K > 0 else None
        self.layers = []
        for k in range(K):
            c = shared if tied else make(f"layer{k}.comp.")
            if fresh:
                self.layers.append(ValidityLayer.add_to(self.params, k, c, rho, tau, alpha))
            else:
                self.layers.append(ValidityLayer(self.params, k, c))
        if not use_compensation:
            for c in self.comps():
                c.zero_out()
                self.params.frozen.update(c.prefix + nm for nm in CompensationNet.names)

    def comps(self):
        seen = [self.comp]
        for layer in self.layers:
            if all(layer.comp is not c for c in seen):
                seen.append(layer.comp)
        return seen

    def calibrate(self, z, y, level=0.6):
        """Shift ``comp``'s output bias so active nodes start at ``level``.

        Inverted estimates of active nodes sit well above 1 (and inactive ones
        below 0), where the clamp has zero subgradient.  Centring the active
        entries just above the decision threshold makes the untrained model
        reproduce the observed diffusion and lets gradients flow.
        """
        if not self.use_compensation:
            return 0.0
        active = np.asarray(y) > 0.5
        if not active.any():
            return 0.0
        shift = level - float(np.median(np.asarray(z)[active]))
        self.params.values[self.comp.prefix + "b3"][...] += shift
        return shift

    # -- inference -------------------------------------------------------

    def raw_estimate(self, y):
        """``z`` for observations ``y`` (the inversion, or ``y`` itself when ablated)."""
        y = np.asarray(y, dtype=np.float64)
        if not self.use_inversion:
            return y.copy()
        return invert_p(self.diffusion, y, self.inversion_m, self.inversion_tol).z

    def head(self, z, b=None, keep=False):
        """Compensation plus K layers; returns ``(scores, caches, xs, lams)``."""
        z = np.asarray(z, dtype=np.float64)
        a = self.constraint.a
        active = b is not None
        if active:
            b = np.broadcast_to(np.asarray(b, dtype=np.float64), z.shape[:-1])
        x, c0 = self.comp.forward(z)
        lam = np.zeros(z.shape[:-1])
        xs, lams, caches = [x], [lam], []
        for layer in self.layers:
            c, ccache = layer.comp.forward(x)
            rho, tau, alpha = layer.rho, layer.tau, layer.alpha
            if active:
                x_new, lam_new = layer_update(x, lam, c, rho, tau, alpha, a, b)
            else:
                x_new, lam_new = layer_update(x, lam, c, rho, tau, alpha)
            caches.append((x, lam, c, ccache))
            x, lam = x_new, lam_new
            xs.append(x)
            lams.append(lam)
        return clamp01(x), (c0, caches, b), xs, lams

    def infer(self, y, known_source_count=None):
        z = self.raw_estimate(y)
        scores, _, xs, lams = self.head(z, known_source_count)
        trace = make_trace(self, xs, lams, known_source_count)
        return InferenceResult(scores, (scores >= self.threshold).astype(np.int8), z, trace)

    # -- training --------------------------------------------------------

    def loss_and_grad(self, z, x_true, b=None):
        """MSE of final scores vs true sources; accumulates into ``params.grads``."""
        scores, (c0, caches, b), xs, lams = self.head(z, b)
        x_true = np.asarray(x_true, dtype=np.float64)
        diff = scores - x_true
        loss = float(np.mean(diff * diff))
        a = self.constraint.a
        active = b is not None
        g_x = 2.0 * diff / diff.size * clamp_grad(xs[-1])
        g_lam = np.zeros(z.shape[:-1])
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            x_k, lam_k, c, ccache = caches[k]
            x_next = xs[k + 1]
            rho, tau, alpha = layer.rho, layer.tau, layer.alpha
            denom = tau + alpha
            g_rho = 0.0
            if active:
                # lam_next = lam_k + rho (a.x_next - b)
                r_next = x_next @ a - b
                g_x = g_x + (g_lam * rho)[..., None] * a
                g_rho += float(np.sum(g_lam * r_next))
                g_lam_k = g_lam.copy()
            else:
                g_lam_k = g_lam.copy()
            g_c = g_x * (tau / denom)
            g_tau = float(np.sum(g_x * (c - x_next))) / denom
            g_alpha = float(np.sum(g_x * (x_k - x_next))) / denom
            g_xk = g_x * (alpha / denom)
            if active:
                r_k = x_k @ a - b
                g_gamma = -(g_x @ a) / denom
                g_lam_k = g_lam_k + g_gamma
                g_rho += float(np.sum(g_gamma * r_k))
                g_xk = g_xk + (g_gamma * rho)[..., None] * a
            g_xk = g_xk + layer.comp.backward(ccache, g_c)
            grads = self.params.grads
            pre = layer.prefix
            grads[pre + "s_rho"] += g_rho * sigmoid(float(self.params.values[pre + "s_rho"]))
            grads[pre + "s_tau"] += g_tau * sigmoid(float(self.params.values[pre + "s_tau"]))
            grads[pre + "s_alpha"] += g_alpha * sigmoid(float(self.params.values[pre + "s_alpha"]))
            g_x, g_lam = g_xk, g_lam_k
        self.comp.backward(c0, g_x)
        for name in self.params.frozen:
            self.params.grads[name].fill(0.0)
        return loss

    def loss(self, z, x_true, b=None):
        scores = self.head(z, b)[0]
        return float(np.mean((scores - np.asarray(x_true)) ** 2))

    # -- persistence -----------------------------------------------------

    def header(self):
        return {
            "kind": "localizer",
            "n": self.n,
            "K": self.K,
            "hidden": self.hidden,
            "tied": self.tied,
            "seed": self.seed,
            "threshold": self.threshold,
            "use_inversion": self.use_inversion,
            "use_compensation": self.use_compensation,
            "inversion_m": self.inversion_m,
            "inversion_tol": self.inversion_tol,
            "constraint_a": self.constraint.a.tolist(),
        }


def make_trace(model, xs, lams, b=None):
    xs = np.stack(xs)
    lams = np.stack(lams)
    residual = None
    if b is not None:
        residual = np.abs(xs @ model.constraint.a - b)
    steps = []
    for k, layer in enumerate(model.layers):
        dl = lams[k + 1] - lams[k]
        dx = xs[k + 1] - xs[k]
        steps.append(dl * dl / layer.rho + layer.alpha * np.sum(dx * dx, axis=-1))
    step = np.stack(steps) if steps else np.zeros((0,) + lams.shape[1:])
    return LayerTrace(xs, lams, residual, step)


def ivgd_infer(model, y, known_source_count=None):
    return model.infer(y, known_source_count)


def check_convergence_conditions(model, cs=None):
    """Per-layer check of positivity and ``alpha - rho * r(A^T A) > 0``."""
    cs = cs or model.constraint
    r = spectral_radius_ata(cs)
    out = []
    for k, layer in enumerate(model.layers):
        alpha, rho = layer.alpha, layer.rho
        margin = alpha - rho * r
        ok_margin = margin > MARGIN_EPS * max(alpha, rho * r)
        out.append({
            "layer": k,
            "alpha": alpha,
            "rho": rho,
            "tau": layer.tau,
            "r_ata": r,
            "margin": margin,
            "alpha_positive": alpha > 0,
            "rho_positive": rho > 0,
            "margin_positive": bool(ok_margin),
            "ok": bool(alpha > 0 and rho > 0 and ok_margin),
        })
    return out


def diagnostics_from_trace(trace):
    """Step norms and constraint residuals per layer, plus a tail-monotonicity flag.

    Batched traces are reduced by taking the largest value per layer.
    ``monotone_tail`` is true when both sequences are nonincreasing over the
    second half of the layers (vacuously true for fewer than two entries).
    """
    steps = np.asarray(trace.step_norm)
    steps = steps.reshape(steps.shape[0], -1).max(axis=1) if steps.size else np.zeros(0)
    if trace.residual is None:
        res = np.zeros(0)
    else:
        r = np.asarray(trace.residual)[1:]
        res = r.reshape(r.shape[0], -1).max(axis=1) if r.size else np.zeros(0)

    def tail_ok(seq):
        tail = seq[len(seq) // 2 :]
        return bool(np.all(np.diff(tail) <= 1e-15 * np.maximum(1.0, np.abs(tail[:-1]))))

    return {
        "step_norms": steps.tolist(),
        "constraint_residuals": res.tolist(),
        "monotone_tail": tail_ok(steps) and tail_ok(res),
    }


# --------------------------------------------------------------------------
# training


@dataclass
class LocalizerTrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 16
    constraint_in_training: bool = True
    calibrate: bool = True
    weight_decay: float = 0.0
    seed: int = 0


def ivgd_train(model, dataset, cfg=None, z_train=None):
    """Train compensation weights and layer scalars; the diffusion model stays frozen.

    ``z`` is computed once per training sample and treated as a constant.
    Returns ``(model, history)`` with the mean loss of every epoch.
    """
    cfg = cfg or LocalizerTrainConfig()
    x_tr = dataset.sources("train")
    if len(x_tr) == 0:
        raise ValidationError("training split is empty")
    y_tr = dataset.diffusions("train")
    z_tr = model.raw_estimate(y_tr) if z_train is None else z_train
    if cfg.calibrate:
        model.calibrate(z_tr, y_tr)
    b_tr = x_tr.sum(axis=1) if cfg.constraint_in_training else None
    state = OptimizerState(cfg.optimizer, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(13,)))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            model.params.zero_grad()
            loss = model.loss_and_grad(z_tr[idx], x_tr[idx], None if b_tr is None else b_tr[idx])
            if not np.isfinite(loss):
                raise TrainingError("localizer loss is not finite", epoch)
            total += loss * len(idx)
            step(model.params, state)
        history.append(total / len(x_tr))
    return model, history


def save_localizer(model, path):
    checkpoint.save(path, model.header(), model.params)


def load_localizer(path, diffusion):
    header, params = checkpoint.load(path)
    if header.get("kind") != "localizer":
        raise FormatError(f"{path}: not a localizer checkpoint")
    return IVGDModel(
        diffusion, header["n"], header["K"], header["hidden"], header["tied"], header["seed"],
        header["threshold"], header["use_inversion"], header["use_compensation"],
        header["inversion_m"], header["inversion_tol"],
        ConstraintSpec(np.array(header["constraint_a"])), params=params,
    )
