"""Monte-Carlo Independent-Cascade simulation and cascade datasets."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .graph import diameter, dump_graph

FORMAT_NAME = "ivgd-cascades"
FORMAT_VERSION = 1
DEFAULT_T_MAX = 10
TRAIN_FRACTION = 0.8
SPLIT_MODES = ("grouped", "sample")

# spawn-key tags keep the three random streams of a dataset disjoint
_SOURCES, _RUNS, _SPLIT = 0, 1, 2


def run_rng(seed, group_id, run_index):
    """Counter-based stream for one simulation, independent of scheduling."""
    ss = np.random.SeedSequence(seed, spawn_key=(_RUNS, group_id, run_index))
    return np.random.Generator(np.random.Philox(ss))


def simulate_ic(g, x, t_max, rng):
    """One Independent-Cascade realisation started from the support of ``x``.

    Each edge gets a single uniform draw up front; since an edge is tried at
    most once (right after its tail activates) this is the usual IC process,
    and it couples runs that share a stream (more seeds => superset).
    """
    x = np.asarray(x)
    if x.shape != (g.n,):
        raise ValidationError(f"source vector has shape {x.shape}, expected ({g.n},)")
    active = x.astype(bool)
    live = rng.random(g.m) < g.prob
    src, dst = g.src[live], g.dst[live]
    frontier = active.copy()
    for _ in range(int(t_max)):
        hit = dst[frontier[src]]
        if hit.size == 0:
            break
        new = np.zeros(g.n, dtype=bool)
        new[hit] = True
        new &= ~active
        if not new.any():
            break
        active |= new
        frontier = new
    return active.astype(np.int8)


@dataclass(eq=False)
class CascadeSample:
    x: np.ndarray
    y: np.ndarray
    y_mean: np.ndarray
    group_id: int
    run: int = 0


@dataclass(eq=False)
class CascadeDataset:
    n: int
    samples: list
    split_groups: dict = field(default_factory=lambda: {"train": [], "test": []})
    meta: dict = field(default_factory=dict)

    @property
    def split_mode(self):
        return self.meta.get("split_mode", "grouped")

    @property
    def split(self):
        """Sample indices per part.

        In ``grouped`` mode ``split_groups`` lists group ids; in ``sample``
        mode it lists sample indices directly.
        """
        train = set(self.split_groups["train"])
        idx = {"train": [], "test": []}
        by_sample = self.split_mode == "sample"
        for i, s in enumerate(self.samples):
            key = i if by_sample else s.group_id
            idx["train" if key in train else "test"].append(i)
        return idx

    def _stack(self, attr, part):
        idx = range(len(self.samples)) if part is None else self.split[part]
        rows = [getattr(self.samples[i], attr) for i in idx]
        if not rows:
            return np.zeros((0, self.n))
        return np.stack(rows).astype(np.float64)

    def sources(self, part=None):
        return self._stack("x", part)

    def diffusions(self, part=None):
        return self._stack("y", part)

    def mean_diffusions(self, part=None):
        return self._stack("y_mean", part)

    def targets(self, part=None, kind="mean"):
        if kind == "mean":
            return self.mean_diffusions(part)
        if kind == "binary":
            return self.diffusions(part)
        raise ValidationError(f"unknown target kind {kind!r}")


def _group_means(samples):
    by_group = {}
    for s in samples:
        by_group.setdefault(s.group_id, []).append(s)
    for members in by_group.values():
        mean = np.mean([m.y for m in members], axis=0)
        for m in members:
            m.y_mean = mean


def graph_fingerprint(g):
    return hashlib.sha256(dump_graph(g).encode()).hexdigest()[:16]


def _split(n_items, seed):
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT,))).permutation(n_items)
    n_train = int(round(TRAIN_FRACTION * n_items))
    if n_items >= 2:
        n_train = min(max(n_train, 1), n_items - 1)
    return {"train": sorted(order[:n_train].tolist()), "test": sorted(order[n_train:].tolist())}


def generate_dataset(g, n_groups, source_rate=0.1, runs=60, t_max=None, seed=0, prob_rule=None,
                     split="grouped"):
    """Simulate ``n_groups`` source sets, each diffused ``runs`` times.

    Every group draws ``ceil(source_rate * n)`` distinct sources uniformly;
    every run is stored as its own sample and shares the group's ``y_mean``.
    With ``split="grouped"`` whole groups are split 8:2 into train and test,
    so test source sets are never seen in training.  ``split="sample"``
    splits individual samples 8:2, letting one source set appear on both
    sides.
    """
    if split not in SPLIT_MODES:
        raise ValidationError(f"unknown split mode {split!r}; expected one of {SPLIT_MODES}")
    if not 0.0 < source_rate < 1.0:
        raise ValidationError("source_rate must lie in (0, 1)")
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    if n_groups < 0:
        raise ValidationError("n_groups must be >= 0")
    k = math.ceil(source_rate * g.n)
    if k == 0:
        raise ValidationError("source_rate * n rounds up to zero sources")
    if t_max is None:
        d = diameter(g)
        t_max = d if d else DEFAULT_T_MAX
    samples = []
    for gid in range(n_groups):
        ss = np.random.SeedSequence(seed, spawn_key=(_SOURCES, gid))
        pick = np.random.default_rng(ss).choice(g.n, size=k, replace=False)
        x = np.zeros(g.n, dtype=np.int8)
        x[pick] = 1
        for r in range(runs):
            y = simulate_ic(g, x, t_max, run_rng(seed, gid, r))
            samples.append(CascadeSample(x, y, None, gid, r))
    _group_means(samples)
    parts = _split(n_groups if split == "grouped" else len(samples), seed)
    meta = {
        "T": int(t_max),
        "runs": int(runs),
        "source_rate": float(source_rate),
        "n_sources": int(k),
        "n_groups": int(n_groups),
        "seed": int(seed),
        "prob_rule": prob_rule,
        "graph": graph_fingerprint(g),
        "split_mode": split,
    }
    return CascadeDataset(g.n, samples, parts, meta)


def dumps_dataset(ds):
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n": ds.n,
        "count": len(ds.samples),
        "meta": ds.meta,
        "split": ds.split_groups,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for s in ds.samples:
        rec = {
            "group": int(s.group_id),
            "run": int(s.run),
            "x": np.flatnonzero(s.x).tolist(),
            "y": np.flatnonzero(s.y).tolist(),
        }
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def loads_dataset(text):
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a cascade dataset (format={header.get('format')!r})")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')!r}")
    n = int(header["n"])
    records = lines[1:]
    if len(records) != header["count"]:
        raise FormatError(f"header announces {header['count']} records, found {len(records)}")
    samples = []
    for i, line in enumerate(records):
        try:
            rec = json.loads(line)
            x = np.zeros(n, dtype=np.int8)
            y = np.zeros(n, dtype=np.int8)
            x[np.asarray(rec["x"], dtype=np.int64)] = 1
            y[np.asarray(rec["y"], dtype=np.int64)] = 1
            samples.append(CascadeSample(x, y, None, int(rec["group"]), int(rec["run"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"record {i}: {exc}") from None
    _group_means(samples)
    split = {"train": list(header["split"]["train"]), "test": list(header["split"]["test"])}
    return CascadeDataset(n, samples, split, header["meta"])


def save_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(ds))


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())
