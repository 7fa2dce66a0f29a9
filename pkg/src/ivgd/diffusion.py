"""Forward diffusion model ``P = G o F`` built from graph residual blocks.

``f`` is a shared per-node 2 -> 6 -> 1 tanh network on two features (own seed
value, normalised incoming seed mass), squashed to [0, 1].  ``g`` is a
deterministic product-form Independent-Cascade influence operator.  The blocks
are averaged with the identity: ``F(x) = (f(x) + x) / 2`` and
``G(z) = (g(z) + z) / 2``.

All operators accept a single vector of shape ``(n,)`` or a batch ``(B, n)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from . import checkpoint
from .errors import NumericError, TrainingError, ValidationError
from .graph import power_iteration_norm
from .metrics import regression_metrics
from .optim import OptimizerState, ParamSet, step

log = logging.getLogger(__name__)

FD_STEP = 1e-5
DAMPING_TRIGGER = 0.95
DAMPING_TARGET = 0.9


# --------------------------------------------------------------------------
# feature construction


@lru_cache(maxsize=64)
def feature_matrix(g):
    """Sparse ``M`` with ``(M x)_i`` = normalised incoming seed mass of node i.

    Row ``i`` holds ``p(u, i) / (indeg(i) * max_u p(u, i))`` so every row sums
    to at most one and ``x -> M x`` is 1-Lipschitz in the max-norm.  Nodes
    without incoming probability mass get an empty row.
    """
    src, dst, prob, starts, heads = g.in_edges
    indeg = np.bincount(dst, minlength=g.n).astype(np.float64)
    pmax = np.zeros(g.n)
    if len(heads):
        pmax[heads] = np.maximum.reduceat(prob, starts)
    denom = indeg * pmax
    denom[denom <= 0] = 1.0
    return sparse.csr_matrix((prob / denom[dst], (dst, src)), shape=(g.n, g.n))


def node_features(g, x):
    x = np.asarray(x, dtype=np.float64)
    mass = (feature_matrix(g) @ x.T).T
    return np.stack([x, mass], axis=-1)


# --------------------------------------------------------------------------
# per-node network f_W


@dataclass(eq=False)
class PerNodeNet:
    params: ParamSet
    spectral_scale: float = 0.9

    @classmethod
    def init(cls, hidden=6, seed=0, spectral_scale=0.9, normalize=True):
        rng = np.random.default_rng(seed)
        params = ParamSet(
            {
                "W1": rng.standard_normal((hidden, 2)) / np.sqrt(2.0),
                "b1": rng.standard_normal(hidden) * 0.1,
                "W2": rng.standard_normal((1, hidden)) / np.sqrt(hidden),
                "b2": np.array(-1.0),
            }
        )
        net = cls(params, spectral_scale)
        if normalize:
            spectral_normalize(net, spectral_scale, inplace=True)
        return net

    @classmethod
    def zeros(cls, hidden=6, spectral_scale=0.9):
        return cls(
            ParamSet({"W1": np.zeros((hidden, 2)), "b1": np.zeros(hidden), "W2": np.zeros((1, hidden)), "b2": 0.0}),
            spectral_scale,
        )

    @property
    def hidden(self):
        return self.params["W1"].shape[0]

    def copy(self):
        return PerNodeNet(self.params.copy(), self.spectral_scale)

    def forward(self, feat):
        p = self.params
        for name in ("W1", "b1", "W2", "b2"):
            if not np.all(np.isfinite(p[name])):
                raise NumericError(f"non-finite weights in {name}")
        h = np.tanh(feat @ p["W1"].T + p["b1"])
        t = np.tanh(h @ p["W2"][0] + p["b2"])
        return 0.5 * (1.0 + t), (feat, h, t)

    def backward(self, cache, grad_out):
        """Accumulate parameter gradients; return the gradient w.r.t. features."""
        feat, h, t = cache
        p = self.params
        g_a2 = grad_out * 0.5 * (1.0 - t * t)
        k = h.shape[-1]
        p.grads["b2"] += g_a2.sum()
        p.grads["W2"][0] += g_a2.reshape(-1) @ h.reshape(-1, k)
        g_a1 = g_a2[..., None] * p["W2"][0] * (1.0 - h * h)
        p.grads["b1"] += g_a1.reshape(-1, k).sum(axis=0)
        p.grads["W1"] += g_a1.reshape(-1, k).T @ feat.reshape(-1, feat.shape[-1])
        return g_a1 @ p["W1"]


def f_forward(net, g, x):
    return net.forward(node_features(g, x))[0]


def spectral_normalize(net, c=None, inplace=False):
    """Rescale each weight matrix by ``c / max(c, sigma_max)``.

    A matrix already within ``c`` (up to 1e-12 relative) is left untouched,
    which makes the operation idempotent.
    """
    c = net.spectral_scale if c is None else c
    if not 0.0 < c < 1.0:
        raise ValidationError("spectral scale must lie in (0, 1)")
    out = net if inplace else net.copy()
    for name in ("W1", "W2"):
        w = out.params[name]
        sigma = power_iteration_norm(w, iters=500, tol=1e-15, seed=0)
        if sigma > c * (1.0 + 1e-12):
            w *= c / sigma
    return out


# --------------------------------------------------------------------------
# propagation operator g


@dataclass
class ICOperator:
    t_steps: int = 2
    c_g: float = 1.0

    def __post_init__(self):
        if self.t_steps < 0:
            raise ValidationError("t_steps must be >= 0")
        if not 0.0 < self.c_g <= 1.0:
            raise ValidationError("damping c_g must lie in (0, 1]")


def _segment_prod(values, starts, heads, n):
    out = np.ones(values.shape[:-1] + (n,))
    if len(heads):
        out[..., heads] = np.multiply.reduceat(values, starts, axis=-1)
    return out


def g_forward(ic, g, zeta, return_cache=False):
    """``q0 = zeta``; ``q_v <- 1 - (1 - zeta_v) prod_u (1 - p(u, v) q_u)``; return ``c_g q``."""
    zeta = np.asarray(zeta, dtype=np.float64)
    src, dst, prob, starts, heads = g.in_edges
    q = zeta
    steps = []
    for _ in range(ic.t_steps):
        fac = 1.0 - prob * q[..., src]
        pi = _segment_prod(fac, starts, heads, g.n)
        steps.append((fac, pi))
        q = 1.0 - (1.0 - zeta) * pi
    out = ic.c_g * q
    if return_cache:
        return out, (zeta, steps)
    return out


def g_backward(ic, g, cache, grad_out):
    """Vector-Jacobian product of :func:`g_forward` w.r.t. ``zeta``."""
    zeta, steps = cache
    src, dst, prob, starts, heads = g.in_edges
    scatter = _scatter_matrix(g)
    g_q = ic.c_g * np.asarray(grad_out, dtype=np.float64)
    g_zeta = np.zeros_like(g_q)
    for fac, pi in reversed(steps):
        g_zeta += g_q * pi
        g_pi = -g_q * (1.0 - zeta)
        zero = fac == 0.0
        n_zero = _segment_sum(zero.astype(np.float64), starts, heads, g.n)
        prod_nz = _segment_prod(np.where(zero, 1.0, fac), starts, heads, g.n)
        safe = np.where(zero, 1.0, fac)
        excl = np.where(
            zero,
            np.where(n_zero[..., dst] == 1, prod_nz[..., dst], 0.0),
            np.where(n_zero[..., dst] == 0, prod_nz[..., dst] / safe, 0.0),
        )
        g_fac = g_pi[..., dst] * excl
        g_q = (scatter.T @ (-prob * g_fac).T).T
    return g_zeta + g_q


def _segment_sum(values, starts, heads, n):
    out = np.zeros(values.shape[:-1] + (n,))
    if len(heads):
        out[..., heads] = np.add.reduceat(values, starts, axis=-1)
    return out


@lru_cache(maxsize=64)
def _scatter_matrix(g):
    src = g.in_edges[0]
    return sparse.csr_matrix((np.ones(len(src)), (np.arange(len(src)), src)), shape=(len(src), g.n))


# --------------------------------------------------------------------------
# residual blocks


def residual_F(net, g, x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (f_forward(net, g, x) + x)


def residual_G(ic, g, zeta):
    zeta = np.asarray(zeta, dtype=np.float64)
    return 0.5 * (g_forward(ic, g, zeta) + zeta)


@dataclass
class LipschitzCertificate:
    operator_name: str
    estimate: float
    method: str
    n_samples: int
    seed: int

    def __post_init__(self):
        if not self.estimate >= 0.0:
            raise ValidationError("Lipschitz estimate must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class ResidualDiffusionModel:
    """``f`` and ``g`` bound to one graph, plus their Lipschitz certificates."""

    graph: object
    net: PerNodeNet
    ic: ICOperator
    cert_f: LipschitzCertificate | None = None
    cert_g: LipschitzCertificate | None = None

    def f(self, x):
        return f_forward(self.net, self.graph, x)

    def g(self, zeta):
        return g_forward(self.ic, self.graph, zeta)

    def F(self, x):
        return residual_F(self.net, self.graph, x)

    def G(self, zeta):
        return residual_G(self.ic, self.graph, zeta)

    def P(self, x):
        return self.G(self.F(x))

    @property
    def n(self):
        return self.graph.n

    def certify(self, n_samples=16, seed=0, method="both", damp=True):
        """Certify ``g`` (damping it if needed) and then ``f``."""
        self.cert_g = certify_lipschitz(self.g, self.n, n_samples, seed, method, "g")
        if damp and self.cert_g.estimate >= DAMPING_TRIGGER:
            self.ic.c_g *= DAMPING_TARGET / self.cert_g.estimate
            log.info("damping g: c_g=%.6g", self.ic.c_g)
            self.cert_g = certify_lipschitz(self.g, self.n, n_samples, seed, method, "g")
        self.cert_f = certify_lipschitz(self.f, self.n, n_samples, seed, method, "f")
        return self.cert_f, self.cert_g

    def loss_and_grad(self, x, target):
        """Mean squared error of ``P(x)`` against ``target``; fills ``net.params.grads``."""
        feat = node_features(self.graph, x)
        fx, net_cache = self.net.forward(feat)
        zeta = 0.5 * (fx + x)
        gz, g_cache = g_forward(self.ic, self.graph, zeta, return_cache=True)
        pred = 0.5 * (gz + zeta)
        diff = pred - target
        loss = float(np.mean(diff * diff))
        g_pred = 2.0 * diff / diff.size
        g_zeta = 0.5 * g_pred + g_backward(self.ic, self.graph, g_cache, 0.5 * g_pred)
        self.net.backward(net_cache, 0.5 * g_zeta)
        return loss

    def header(self):
        return {
            "kind": "diffusion",
            "architecture": f"pernode-2-{self.net.hidden}-1",
            "hidden": self.net.hidden,
            "c": self.net.spectral_scale,
            "c_g": self.ic.c_g,
            "t_steps": self.ic.t_steps,
            "n": self.n,
            "certificates": {
                "f": self.cert_f.to_dict() if self.cert_f else None,
                "g": self.cert_g.to_dict() if self.cert_g else None,
            },
        }


def p_forward(model, x):
    return model.P(x)


# --------------------------------------------------------------------------
# certification


def _sample_points(rng, n, count):
    """Deterministic mixture: the origin, then uniform, scaled-uniform and
    sparse binary points in rotation.  Draws are consumed point by point so a
    longer run extends a shorter one."""
    pts = []
    for k in range(count):
        kind = k % 4
        if kind == 0 and k == 0:
            pts.append(np.zeros(n))
        elif kind in (0, 1):
            pts.append(rng.random(n))
        elif kind == 2:
            s = rng.random()
            pts.append(s * rng.random(n))
        else:
            pts.append((rng.random(n) < 0.15).astype(np.float64))
    return np.array(pts).reshape(count, n)


def jacobian_fd(op, x, h=FD_STEP):
    """Dense Jacobian by central differences, one batched call."""
    n = x.shape[-1]
    eye = np.eye(n) * h
    out = op(np.concatenate([x + eye, x - eye]))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite values in finite-difference Jacobian")
    return ((out[:n] - out[n:]) / (2.0 * h)).T


def certify_lipschitz(op, n, n_samples=16, seed=0, method="both", name="op"):
    """Empirical Lipschitz constant (2-norm) of a map on [0, 1]^n.

    ``jacobian_power_iteration``: largest Jacobian spectral norm over sample
    points.  ``sampled_pairs``: largest difference quotient over random pairs.
    ``both``: the larger of the two.
    """
    if method not in ("jacobian_power_iteration", "sampled_pairs", "both"):
        raise ValidationError(f"unknown certification method {method!r}")
    est = 0.0
    if method in ("jacobian_power_iteration", "both"):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        for x in _sample_points(rng, n, n_samples):
            J = jacobian_fd(op, x)
            est = max(est, power_iteration_norm(J, iters=2000, tol=1e-13, seed=seed))
    if method in ("sampled_pairs", "both"):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        pairs = _sample_points(rng, 2 * n, n_samples).reshape(n_samples, 2, n)
        a, b = pairs[:, 0], pairs[:, 1]
        num = np.linalg.norm(op(a) - op(b), axis=-1)
        den = np.linalg.norm(a - b, axis=-1)
        if not np.all(np.isfinite(num)):
            raise NumericError("non-finite operator output while certifying")
        ok = den > 0
        if ok.any():
            est = max(est, float((num[ok] / den[ok]).max()))
    return LipschitzCertificate(name, float(est), method, int(n_samples), int(seed))


# --------------------------------------------------------------------------
# training


def build_model(g, hidden=6, c=0.9, t_steps=2, seed=0):
    return ResidualDiffusionModel(g, PerNodeNet.init(hidden, seed, c), ICOperator(t_steps))


@dataclass
class ForwardTrainConfig:
    epochs: int = 100
    lr: float = 0.01
    optimizer: str = "adam"
    batch_size: int = 32
    target: str = "mean"
    seed: int = 0
    cert_samples: int = 16


def _evaluate(model, x, target):
    if len(x) == 0:
        return {"mse": float("nan"), "mae": float("nan")}
    return regression_metrics(model.P(x), target)


def train_forward(model, dataset, cfg=None):
    """Fit ``f`` so that ``P(x)`` matches the diffusion targets of the train split.

    ``g`` is certified (and damped) first so that ``f`` is fitted against the
    operator actually used for inversion; weights are re-normalised after
    every update and ``f`` is certified at the end.
    """
    cfg = cfg or ForwardTrainConfig()
    x_tr = dataset.sources("train")
    t_tr = dataset.targets("train", cfg.target)
    x_te = dataset.sources("test")
    t_te = dataset.targets("test", cfg.target)
    if len(x_tr) == 0:
        raise ValidationError("training split is empty")
    if model.cert_g is None:
        model.cert_g = certify_lipschitz(model.g, model.n, cfg.cert_samples, cfg.seed, "both", "g")
        if model.cert_g.estimate >= DAMPING_TRIGGER:
            model.ic.c_g *= DAMPING_TARGET / model.cert_g.estimate
            model.cert_g = certify_lipschitz(model.g, model.n, cfg.cert_samples, cfg.seed, "both", "g")
    untrained = _evaluate(model, x_te, t_te)
    state = OptimizerState(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    params = model.net.params
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            params.zero_grad()
            loss = model.loss_and_grad(x_tr[idx], t_tr[idx])
            if not np.isfinite(loss):
                raise TrainingError("forward-model loss is not finite", epoch)
            total += loss * len(idx)
            step(params, state)
            spectral_normalize(model.net, inplace=True)
        history.append(total / len(x_tr))
    model.cert_f = certify_lipschitz(model.f, model.n, cfg.cert_samples, cfg.seed, "both", "f")
    report = {"untrained": untrained, **_evaluate(model, x_te, t_te), "history": history}
    return model, report


# --------------------------------------------------------------------------
# persistence


def save_model(model, path):
    checkpoint.save(path, model.header(), model.net.params)


def load_model(path, g):
    header, params = checkpoint.load(path)
    if header.get("kind") != "diffusion":
        raise checkpoint.FormatError(f"{path}: not a diffusion checkpoint")
    if header["n"] != g.n:
        raise ValidationError(f"checkpoint is for n={header['n']}, graph has n={g.n}")
    certs = header["certificates"]
    return ResidualDiffusionModel(
        g,
        PerNodeNet(params, header["c"]),
        ICOperator(header["t_steps"], header["c_g"]),
        LipschitzCertificate.from_dict(certs["f"]) if certs["f"] else None,
        LipschitzCertificate.from_dict(certs["g"]) if certs["g"] else None,
    )
