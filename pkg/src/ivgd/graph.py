"""Directed sparse graphs with per-edge influence probabilities.

Edges are stored as three parallel arrays (``src``, ``dst``, ``prob``) sorted
by ``(src, dst)``.  A second ordering sorted by ``(dst, src)`` is kept for the
incoming-edge products used by the propagation operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import aslinearoperator

from .errors import NumericError, ParseError, ValidationError

WEIGHTED_CASCADE = "weighted_cascade"


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    src: np.ndarray
    dst: np.ndarray
    prob: np.ndarray
    labels: tuple | None = None
    in_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("graph needs at least one node")
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        prob = np.asarray(self.prob, dtype=np.float64).reshape(-1)
        if not (len(src) == len(dst) == len(prob)):
            raise ValidationError("src, dst and prob must have equal length")
        if len(src):
            if src.min() < 0 or dst.min() < 0:
                raise ValidationError("negative node index")
            if max(src.max(), dst.max()) >= self.n:
                raise ValidationError("node index out of range")
            if np.any(src == dst):
                raise ValidationError("self-loops are not allowed")
            if not np.all(np.isfinite(prob)) or prob.min() < 0 or prob.max() > 1:
                raise ValidationError("edge probabilities must lie in [0, 1]")
        order = np.lexsort((dst, src))
        src, dst, prob = src[order], dst[order], prob[order]
        if len(src) > 1:
            same = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
            if same.any():
                raise ValidationError("duplicate directed edge")
        object.__setattr__(self, "src", _frozen(src, np.int64))
        object.__setattr__(self, "dst", _frozen(dst, np.int64))
        object.__setattr__(self, "prob", _frozen(prob, np.float64))
        object.__setattr__(self, "in_order", _frozen(np.lexsort((src, dst)), np.int64))

    @cached_property
    def in_edges(self):
        """Incoming edges grouped by head: ``(src, dst, prob, starts, heads)``.

        ``starts`` indexes the first edge of every node in ``heads`` (the nodes
        with nonzero in-degree), ready for ``np.ufunc.reduceat``.
        """
        o = self.in_order
        src, dst, prob = self.src[o], self.dst[o], self.prob[o]
        heads, starts = np.unique(dst, return_index=True)
        return src, dst, prob, starts, heads

    @property
    def m(self):
        return len(self.src)

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @property
    def out_adj(self):
        """CSR view ``(indptr, dst)`` of outgoing edges."""
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.src, minlength=self.n), out=indptr[1:])
        return indptr, self.dst

    @property
    def in_adj(self):
        """CSC view ``(indptr, src)`` of incoming edges."""
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.dst, minlength=self.n), out=indptr[1:])
        return indptr, self.src[self.in_order]

    def in_degree(self):
        return np.bincount(self.dst, minlength=self.n)

    def out_degree(self):
        return np.bincount(self.src, minlength=self.n)

    def prob_matrix(self):
        """Sparse ``n x n`` matrix with entry ``(u, v)`` = p(u, v)."""
        return sparse.csr_matrix((self.prob, (self.src, self.dst)), shape=(self.n, self.n))

    def undirected_adjacency(self):
        a = sparse.csr_matrix(
            (np.ones(self.m), (self.src, self.dst)), shape=(self.n, self.n)
        )
        a = ((a + a.T) > 0).astype(np.float64)
        return sparse.csr_matrix(a)

    def check_consistency(self):
        """Re-derive the in/out views from each other and compare edge sets."""
        indptr, srcs = self.in_adj
        dsts = np.repeat(np.arange(self.n), np.diff(indptr))
        from_in = sorted(zip(srcs.tolist(), dsts.tolist()))
        return from_in == self.edges

    def with_probs(self, prob_rule):
        return Graph(self.n, self.src, self.dst, edge_probabilities(self, prob_rule), self.labels)


def parse_prob_rule(rule):
    """Normalise ``"weighted_cascade"``, a float, or ``"constant(p)"``."""
    if isinstance(rule, (int, float)) and not isinstance(rule, bool):
        p = float(rule)
    elif isinstance(rule, tuple) and len(rule) == 2 and rule[0] == "constant":
        p = float(rule[1])
    elif isinstance(rule, str):
        text = rule.strip().lower()
        if text in (WEIGHTED_CASCADE, "wc"):
            return WEIGHTED_CASCADE
        if text.startswith("constant(") and text.endswith(")"):
            p = float(text[len("constant(") : -1])
        else:
            try:
                p = float(text)
            except ValueError:
                raise ValidationError(f"unknown probability rule {rule!r}") from None
    else:
        raise ValidationError(f"unknown probability rule {rule!r}")
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"constant edge probability {p} outside [0, 1]")
    return ("constant", p)


def format_prob_rule(rule):
    rule = parse_prob_rule(rule)
    if rule == WEIGHTED_CASCADE:
        return WEIGHTED_CASCADE
    return f"constant({rule[1]!r})"


def edge_probabilities(g_or_edges, prob_rule, n=None):
    rule = parse_prob_rule(prob_rule)
    if isinstance(g_or_edges, Graph):
        src, dst, n = g_or_edges.src, g_or_edges.dst, g_or_edges.n
    else:
        src, dst = g_or_edges
    if rule == WEIGHTED_CASCADE:
        indeg = np.bincount(dst, minlength=n).astype(np.float64)
        return 1.0 / indeg[dst]
    return np.full(len(src), rule[1])


def _build(n, pairs, directed, prob_rule, labels=None):
    pairs = set(pairs)
    if not directed:
        pairs |= {(v, u) for u, v in pairs}
    pairs = sorted((u, v) for u, v in pairs if u != v)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    prob = edge_probabilities((src, dst), prob_rule, n)
    return Graph(n, src, dst, prob, labels)


def load_edge_list(text, directed=False, prob_rule=WEIGHTED_CASCADE, relabel=False):
    """Parse ``u v`` lines into a :class:`Graph`.

    Lines starting with ``#`` and blank lines are skipped; columns after the
    second are ignored.  Undirected input is expanded into both directions,
    self-loops are dropped and repeated edges collapse to one.

    With ``relabel=True`` arbitrary tokens are mapped to dense ids in order of
    first appearance and the original tokens are kept in ``Graph.labels``.
    """
    pairs = []
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"expected 'u v', got {raw!r}", lineno)
        if relabel:
            ids = []
            for tok in parts[:2]:
                ids.append(mapping.setdefault(tok, len(mapping)))
            u, v = ids
        else:
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer node index in {raw!r}", lineno) from None
            if u < 0 or v < 0:
                raise ValidationError(f"line {lineno}: negative node index")
        pairs.append((u, v))
    if relabel:
        n = len(mapping)
        labels = tuple(mapping)
    else:
        n = 1 + max((max(p) for p in pairs), default=-1)
        labels = None
    if n == 0:
        raise ValidationError("edge list contains no edges")
    return _build(n, pairs, directed, prob_rule, labels)


def dump_graph(g):
    """Canonical text form: ``n m`` then sorted ``u v p`` lines."""
    lines = [f"{g.n} {g.m}"]
    lines += [f"{u} {v} {p:.17g}" for u, v, p in zip(g.src.tolist(), g.dst.tolist(), g.prob.tolist())]
    return "\n".join(lines) + "\n"


def load_graph_dump(text):
    rows = [r for r in text.splitlines() if r.strip()]
    if not rows:
        raise ParseError("empty graph dump", 1)
    try:
        n, m = (int(t) for t in rows[0].split())
    except ValueError:
        raise ParseError("header must be 'n m'", 1) from None
    if len(rows) - 1 != m:
        raise ParseError(f"header announces {m} edges, found {len(rows) - 1}", 1)
    src, dst, prob = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        parts = row.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'u v p', got {row!r}", lineno)
        try:
            src.append(int(parts[0]))
            dst.append(int(parts[1]))
            prob.append(float(parts[2]))
        except ValueError:
            raise ParseError(f"malformed edge {row!r}", lineno) from None
    return Graph(n, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(prob))


def load_karate(prob_rule=WEIGHTED_CASCADE):
    text = resources.files("ivgd.data").joinpath("karate.txt").read_text(encoding="utf-8")
    return load_edge_list(text, directed=False, prob_rule=prob_rule)


GENERATOR_KINDS = ("path", "star", "cycle", "erdos_renyi", "er")


def generate_graph(kind, n, p_edge=0.0, seed=0, prob_rule=WEIGHTED_CASCADE):
    """Undirected textbook graphs: ``path``, ``star``, ``cycle``, ``erdos_renyi``."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    if kind == "path":
        pairs = [(i, i + 1) for i in range(n - 1)]
    elif kind == "star":
        pairs = [(0, i) for i in range(1, n)]
    elif kind == "cycle":
        pairs = [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(i, i + 1) for i in range(n - 1)]
    elif kind in ("erdos_renyi", "er"):
        if not 0.0 <= p_edge <= 1.0:
            raise ValidationError("p_edge must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(len(iu)) < p_edge
        pairs = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    else:
        raise ValidationError(f"unknown graph kind {kind!r}")
    return _build(n, pairs, False, prob_rule)


def diameter(g, max_nodes=2000):
    """Longest finite directed hop distance, or ``None`` for large graphs."""
    if g.n > max_nodes:
        return None
    if g.m == 0:
        return 0
    adj = sparse.csr_matrix((np.ones(g.m), (g.src, g.dst)), shape=(g.n, g.n))
    dist = csgraph.shortest_path(adj, unweighted=True, directed=True)
    finite = dist[np.isfinite(dist)]
    return int(finite.max())


def power_iteration_norm(op, dim=None, iters=1000, tol=1e-12, seed=0):
    """Largest singular value of a linear operator by power iteration on A^T A.

    ``op`` may be a dense array, a sparse matrix or a
    :class:`scipy.sparse.linalg.LinearOperator`.  Iteration stops once the
    estimate changes by at most ``tol`` (relative to ``max(1, sigma)``).
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    A = aslinearoperator(op)
    if dim is None:
        dim = A.shape[1]
    if dim != A.shape[1]:
        raise ValidationError(f"dim {dim} does not match operator input size {A.shape[1]}")
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = A.matvec(v)
        new = float(np.linalg.norm(u))
        if not np.isfinite(new):
            raise NumericError("non-finite value during power iteration")
        if new == 0.0:
            return 0.0
        w = A.rmatvec(u / new)
        wn = np.linalg.norm(w)
        if not np.isfinite(wn):
            raise NumericError("non-finite value during power iteration")
        v = w / wn
        done = abs(new - sigma) <= tol * max(1.0, new)
        sigma = new
        if done:
            break
    return sigma


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Linear validity constraint ``a . x = b`` (one row)."""

    a: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        if not np.any(a):
            raise ValidationError("constraint coefficient vector must be nonzero")
        object.__setattr__(self, "a", _frozen(a, np.float64))
        object.__setattr__(self, "b", float(self.b))

    @classmethod
    def source_count(cls, n, count=0.0):
        return cls(np.ones(n), count)

    def residual(self, x):
        return np.asarray(x) @ self.a - self.b


def spectral_radius_ata(c):
    """r(A^T A) for a single-row A, which is exactly ||a||^2."""
    return float(c.a @ c.a)
