"""Experiment configuration: INI sections mapped onto small dataclasses.

Every field has a default, so an empty file is a valid Karate configuration.
The defaults follow the published parameter settings where those exist
(K=10 layers, tau/alpha/rho = 10/1/1e-3, 100 epochs, SGD lr 1e-3, 60 runs,
10% sources, 8:2 split, LPSI alpha 0.01).
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .graph import GENERATOR_KINDS


@dataclass
class GraphSection:
    source: str = "karate"          # "karate", a generator kind, or "file"
    path: str = ""                  # edge-list file when source = file
    directed: bool = False
    n: int = 0                      # generator size
    p_edge: float = 0.1             # erdos_renyi density
    graph_seed: int = 0
    prob_rule: str = "weighted_cascade"


@dataclass
class CascadeSection:
    n_groups: int = 10
    runs: int = 60
    source_rate: float = 0.1
    t_max: int | None = None        # None -> graph diameter
    split: str = "grouped"
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class ForwardSection:
    hidden: int = 6
    c: float = 0.9
    c_g: float = 1.0
    t_steps: int = 2
    epochs: int = 100
    lr: float = 0.01
    optimizer: str = "adam"
    batch_size: int = 32
    target: str = "mean"
    cert_samples: int = 16
    cert_method: str = "both"


@dataclass
class InversionSection:
    m: int = 20
    tol: float = 1e-6


@dataclass
class LocalizerSection:
    K: int = 10
    hidden: int = 64
    tau0: float = 10.0
    alpha0: float = 1.0
    rho0: float = 1e-3
    tied: bool = True
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 16
    constraint_in_training: bool = True
    calibrate: bool = True
    weight_decay: float = 0.0


@dataclass
class LpsiSection:
    alpha: float = 0.01
    tol: float = 1e-12
    max_iters: int = 10_000


@dataclass
class MetricsSection:
    threshold: float = 0.5


@dataclass
class OutputSection:
    dir: str = "runs"


SECTIONS = {
    "graph": GraphSection,
    "cascade": CascadeSection,
    "forward": ForwardSection,
    "inversion": InversionSection,
    "localizer": LocalizerSection,
    "lpsi": LpsiSection,
    "metrics": MetricsSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    graph: GraphSection = field(default_factory=GraphSection)
    cascade: CascadeSection = field(default_factory=CascadeSection)
    forward: ForwardSection = field(default_factory=ForwardSection)
    inversion: InversionSection = field(default_factory=InversionSection)
    localizer: LocalizerSection = field(default_factory=LocalizerSection)
    lpsi: LpsiSection = field(default_factory=LpsiSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: str = field(default=".", compare=False)

    def validate(self):
        g = self.graph
        if g.source == "file":
            path = self.resolve(g.path)
            if not g.path or not os.path.isfile(path):
                raise ConfigError(f"graph.path does not exist: {g.path!r}")
        elif g.source != "karate" and g.source not in GENERATOR_KINDS:
            raise ConfigError(f"unknown graph.source {g.source!r}")
        elif g.source in GENERATOR_KINDS and g.n < 1:
            raise ConfigError("generated graphs need graph.n >= 1")
        c = self.cascade
        if c.split not in ("grouped", "sample"):
            raise ConfigError(f"cascade.split must be grouped or sample, not {c.split!r}")
        if not c.seeds:
            raise ConfigError("cascade.seeds must list at least one seed")
        for sec, name in ((self.forward, "forward"), (self.localizer, "localizer")):
            if sec.optimizer not in ("sgd", "adam"):
                raise ConfigError(f"{name}.optimizer must be sgd or adam")
        if self.localizer.K < 1:
            raise ConfigError("localizer.K must be >= 1")
        if not 0.0 < self.lpsi.alpha < 1.0:
            raise ConfigError("lpsi.alpha must lie strictly inside (0, 1)")
        return self

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def section_dict(self, name):
        return asdict(getattr(self, name))

    def digest(self, *names):
        """Stable hash of the named sections (used to decide stage reuse)."""
        blob = json.dumps({n: self.section_dict(n) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self):
        parser = _parser()
        for name in SECTIONS:
            parser[name] = {k: _format(v) for k, v in self.section_dict(name).items()}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)


def _parser():
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (``K``)
    return parser


def _format(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _convert(section, key, raw, default, annotation):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, list):
            return [int(v) for v in raw.replace(",", " ").split()]
        if "None" in str(annotation):
            return None if raw == "" else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def parse_config(text, base_dir="."):
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig(base_dir=base_dir)
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        sec = getattr(cfg, name)
        known = {f.name: f for f in fields(sec)}
        for key, raw in parser[name].items():
            if key not in known:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            default = getattr(sec, key)
            setattr(sec, key, _convert(name, key, raw, default, known[key].type))
    return cfg.validate()


def load_config(path=None):
    if path is None:
        return ExperimentConfig().validate()
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))
