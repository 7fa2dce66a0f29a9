"""Stage-by-stage experiment harness.

Every seed gets its own directory ``<out>/seed_<s>/``.  Each stage writes its
artifacts there and records a digest of the configuration sections it depends
on in ``stamps.json``; a later run skips a stage whose digest and artifacts
are unchanged.  Stage digests chain, so changing an upstream section
invalidates everything downstream.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import metrics
from .cascade import generate_dataset, load_dataset, save_dataset
from .config import ExperimentConfig
from .diffusion import ForwardTrainConfig, build_model, certify_lipschitz, load_model, save_model, train_forward
from .errors import ConfigError, InvertibilityError
from .graph import generate_graph, load_edge_list, load_karate
from .inversion import invert_p
from .localizer import (
    IVGDModel,
    LocalizerTrainConfig,
    diagnostics_from_trace,
    ivgd_train,
    load_localizer,
    save_localizer,
)
from .lpsi import LpsiConfig, lpsi

log = logging.getLogger(__name__)

STAGES = (
    "generate",
    "train-forward",
    "certify",
    "invert",
    "train-localizer",
    "localize",
    "baseline-lpsi",
    "evaluate",
)
ABLATIONS = ("no_inversion", "no_compensation", "no_validity")
METRIC_FIELDS = ("method", "dataset", "seed", "acc", "pr", "re", "fs", "auc", "tp", "fp", "tn", "fn")

# configuration sections each stage depends on (cumulative along the chain)
_SECTIONS = {
    "generate": ("graph", "cascade"),
    "train-forward": ("graph", "cascade", "forward"),
    "certify": ("graph", "cascade", "forward"),
    "invert": ("graph", "cascade", "forward", "inversion"),
    "train-localizer": ("graph", "cascade", "forward", "inversion", "localizer"),
    "localize": ("graph", "cascade", "forward", "inversion", "localizer", "metrics"),
    "baseline-lpsi": ("graph", "cascade", "lpsi"),
    "evaluate": ("graph", "cascade", "forward", "inversion", "localizer", "lpsi", "metrics"),
}

_OUTPUTS = {
    "generate": ("dataset.jsonl",),
    "train-forward": ("forward.ckpt", "forward_report.json"),
    "certify": ("certificates.json",),
    "invert": ("inversion.json",),
    "train-localizer": ("localizer.ckpt", "localizer_history.json"),
    "localize": ("ivgd_predictions.tsv", "ivgd_traces.jsonl"),
    "baseline-lpsi": ("lpsi_predictions.tsv",),
    "evaluate": ("metrics.csv", "roc_ivgd.csv", "roc_lpsi.csv"),
}


def build_graph(cfg):
    g = cfg.graph
    if g.source == "karate":
        return load_karate(g.prob_rule)
    if g.source == "file":
        with open(cfg.resolve(g.path), encoding="utf-8") as fh:
            return load_edge_list(fh.read(), g.directed, g.prob_rule)
    return generate_graph(g.source, g.n, g.p_edge, g.graph_seed, g.prob_rule)


def dataset_name(cfg):
    if cfg.graph.source == "file":
        return os.path.splitext(os.path.basename(cfg.graph.path))[0]
    return cfg.graph.source


# --------------------------------------------------------------------------
# run context


@dataclass
class Run:
    cfg: ExperimentConfig
    seed: int
    out: str
    known_source_count: int | None = None

    @property
    def dir(self):
        return os.path.join(self.out, f"seed_{self.seed}")

    def path(self, name):
        return os.path.join(self.dir, name)

    def digest(self, stage):
        extra = {"seed": self.seed}
        if stage in ("localize", "evaluate"):
            extra["known_source_count"] = self.known_source_count
        return self.cfg.digest(*_SECTIONS[stage]) + json.dumps(extra, sort_keys=True)

    def stamps(self):
        try:
            with open(self.path("stamps.json"), encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return {}

    def fresh(self, stage):
        ok = self.stamps().get(stage) == self.digest(stage)
        return ok and all(os.path.exists(self.path(f)) for f in _OUTPUTS[stage])

    def stamp(self, stage):
        stamps = self.stamps()
        stamps[stage] = self.digest(stage)
        _write(self.path("stamps.json"), json.dumps(stamps, indent=1, sort_keys=True) + "\n")

    def require(self, *names):
        for name in names:
            if not os.path.exists(self.path(name)):
                raise ConfigError(f"missing artifact {self.path(name)}; run the earlier stages first")

    # lazily loaded artifacts
    def graph(self):
        return build_graph(self.cfg)

    def dataset(self):
        self.require("dataset.jsonl")
        return load_dataset(self.path("dataset.jsonl"))

    def forward_model(self):
        self.require("forward.ckpt")
        return load_model(self.path("forward.ckpt"), self.graph())

    def localizer(self):
        self.require("localizer.ckpt")
        return load_localizer(self.path("localizer.ckpt"), self.forward_model())


def _write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# stages


def stage_generate(run):
    c = run.cfg.cascade
    ds = generate_dataset(run.graph(), c.n_groups, c.source_rate, c.runs, c.t_max, run.seed,
                          run.cfg.graph.prob_rule, c.split)
    save_dataset(ds, run.path("dataset.jsonl"))


def forward_config(cfg, seed):
    f = cfg.forward
    return ForwardTrainConfig(f.epochs, f.lr, f.optimizer, f.batch_size, f.target, seed, f.cert_samples)


def stage_train_forward(run):
    f = run.cfg.forward
    model = build_model(run.graph(), f.hidden, f.c, f.t_steps, run.seed)
    model.ic.c_g = f.c_g
    model, report = train_forward(model, run.dataset(), forward_config(run.cfg, run.seed))
    save_model(model, run.path("forward.ckpt"))
    _write(run.path("forward_report.json"), _json(report))


def stage_certify(run):
    f = run.cfg.forward
    model = run.forward_model()
    cert_f = certify_lipschitz(model.f, model.n, f.cert_samples, run.seed, f.cert_method, "f")
    cert_g = certify_lipschitz(model.g, model.n, f.cert_samples, run.seed, f.cert_method, "g")
    _write(run.path("certificates.json"), _json({"f": cert_f.to_dict(), "g": cert_g.to_dict()}))
    for name, cert in (("f", cert_f), ("g", cert_g)):
        if not cert.estimate < 1.0:
            raise InvertibilityError(f"certified Lipschitz constant of {name} is {cert.estimate:.6g} >= 1")


def stage_invert(run):
    inv = run.cfg.inversion
    model = run.forward_model()
    ds = run.dataset()
    rep = invert_p(model, ds.diffusions("test"), inv.m, inv.tol)
    summary = {
        "samples": int(rep.z.shape[0]),
        "iters_g": rep.iters_g,
        "iters_f": rep.iters_f,
        "residual_g": rep.residual_g,
        "residual_f": rep.residual_f,
        "converged": rep.converged,
        "roundtrip_max_error": float(np.max(np.abs(model.P(rep.z) - ds.diffusions("test")), initial=0.0)),
    }
    _write(run.path("inversion.json"), _json(summary))


def make_localizer(cfg, diffusion, seed, variant=None):
    loc = cfg.localizer
    return IVGDModel(
        diffusion,
        diffusion.n,
        K=0 if variant == "no_validity" else loc.K,
        hidden=loc.hidden,
        tied=loc.tied,
        seed=seed,
        threshold=cfg.metrics.threshold,
        use_inversion=variant != "no_inversion",
        use_compensation=variant != "no_compensation",
        inversion_m=cfg.inversion.m,
        inversion_tol=cfg.inversion.tol,
        rho=loc.rho0,
        tau=loc.tau0,
        alpha=loc.alpha0,
    )


def localizer_config(cfg, seed):
    loc = cfg.localizer
    return LocalizerTrainConfig(loc.epochs, loc.lr, loc.optimizer, loc.batch_size,
                                loc.constraint_in_training, loc.calibrate, loc.weight_decay, seed)


def _train_localizer(run, variant=None):
    model = make_localizer(run.cfg, run.forward_model(), run.seed, variant)
    model, history = ivgd_train(model, run.dataset(), localizer_config(run.cfg, run.seed))
    return model, history


def stage_train_localizer(run):
    model, history = _train_localizer(run)
    save_localizer(model, run.path("localizer.ckpt"))
    _write(run.path("localizer_history.json"), _json({"loss": history}))


def format_predictions(scores, labels):
    lines = ["# sample\tscores\tlabels"]
    for i, (s, lab) in enumerate(zip(scores, labels)):
        lines.append(f"{i}\t{','.join(repr(float(v)) for v in s)}\t{''.join(str(int(v)) for v in lab)}")
    return "\n".join(lines) + "\n"


def read_predictions(path):
    scores, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            _, s, lab = line.rstrip("\n").split("\t")
            scores.append([float(v) for v in s.split(",")])
            labels.append([int(ch) for ch in lab])
    return np.array(scores, dtype=np.float64), np.array(labels, dtype=np.int8)


def localize(model, ds, known_source_count=None):
    y = ds.diffusions("test")
    b = None
    if known_source_count is not None:
        b = float(known_source_count)
    return model.infer(y, b)


def stage_localize(run):
    model = run.localizer()
    res = localize(model, run.dataset(), run.known_source_count)
    _write(run.path("ivgd_predictions.tsv"), format_predictions(res.scores, res.labels))
    records = []
    for i in range(res.scores.shape[0]):
        step = res.trace.step_norm[:, i].tolist()
        rec = {"sample": i, "step_norms": step}
        if res.trace.residual is not None:
            rec["constraint_residuals"] = res.trace.residual[:, i].tolist()
        records.append(json.dumps(rec, sort_keys=True))
    summary = diagnostics_from_trace(res.trace)
    records.append(json.dumps({"summary": summary}, sort_keys=True))
    _write(run.path("ivgd_traces.jsonl"), "\n".join(records) + "\n")


def stage_baseline_lpsi(run):
    lc = run.cfg.lpsi
    scores, labels = lpsi(run.graph(), run.dataset().diffusions("test"), LpsiConfig(lc.alpha, lc.tol, lc.max_iters))
    _write(run.path("lpsi_predictions.tsv"), format_predictions(scores, labels))


def metrics_row(method, dataset, seed, scores, labels, truth):
    rep = metrics.evaluate(scores, labels, truth)
    row = {"method": method, "dataset": dataset, "seed": seed}
    row.update({k: getattr(rep, k) for k in METRIC_FIELDS[3:]})
    return row


def write_metrics(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in METRIC_FIELDS})


def read_metrics(path):
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {"method": raw["method"], "dataset": raw["dataset"], "seed": int(raw["seed"])}
            for k in ("acc", "pr", "re", "fs"):
                row[k] = float(raw[k])
            row["auc"] = float(raw["auc"]) if raw["auc"] else None
            for k in ("tp", "fp", "tn", "fn"):
                row[k] = int(raw[k])
            rows.append(row)
    return rows


def write_roc(path, scores, truth):
    try:
        pts = metrics.roc_points(scores, truth)
    except metrics.UndefinedMetricError:
        pts = []
    _write(path, "fpr,tpr\n" + "".join(f"{a!r},{b!r}\n" for a, b in pts))


def stage_evaluate(run):
    truth = run.dataset().sources("test")
    name = dataset_name(run.cfg)
    rows = []
    for method, fname, roc in (("IVGD", "ivgd_predictions.tsv", "roc_ivgd.csv"),
                               ("LPSI", "lpsi_predictions.tsv", "roc_lpsi.csv")):
        run.require(fname)
        scores, labels = read_predictions(run.path(fname))
        rows.append(metrics_row(method, name, run.seed, scores, labels, truth))
        write_roc(run.path(roc), scores, truth)
    write_metrics(run.path("metrics.csv"), rows)


STAGE_FUNCS = {
    "generate": stage_generate,
    "train-forward": stage_train_forward,
    "certify": stage_certify,
    "invert": stage_invert,
    "train-localizer": stage_train_localizer,
    "localize": stage_localize,
    "baseline-lpsi": stage_baseline_lpsi,
    "evaluate": stage_evaluate,
}


def run_stage(run, stage, force=False):
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    os.makedirs(run.dir, exist_ok=True)
    if not force and run.fresh(stage):
        log.info("seed %d: %s up to date", run.seed, stage)
        return False
    log.info("seed %d: running %s", run.seed, stage)
    try:
        STAGE_FUNCS[stage](run)
    except Exception as exc:
        exc.stage = stage
        raise
    run.stamp(stage)
    return True


def echo_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.ini"), cfg.to_ini())


def seeds_of(cfg, seed=None):
    return [seed] if seed is not None else list(cfg.cascade.seeds)


def collect_metrics(out, seeds, fname="metrics.csv"):
    rows = []
    for s in seeds:
        path = os.path.join(out, f"seed_{s}", fname)
        if os.path.exists(path):
            rows += read_metrics(path)
    return rows


def run_pipeline(cfg, out=None, seed=None, until=None, known_source_count=None):
    """Run every stage (or stages up to ``until``) for each seed.

    Returns the rows of the aggregated ``<out>/metrics.csv`` (empty when the
    evaluate stage was not reached).
    """
    out = out or cfg.output.dir
    if until is not None and until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; expected one of {', '.join(STAGES)}")
    stages = STAGES if until is None else STAGES[: STAGES.index(until) + 1]
    echo_config(cfg, out)
    seeds = seeds_of(cfg, seed)
    for s in seeds:
        run = Run(cfg, s, out, known_source_count)
        echo_config(cfg, run.dir)
        for stage in stages:
            run_stage(run, stage)
    if "evaluate" not in stages:
        return []
    rows = collect_metrics(out, seeds)
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    return rows


def run_ablation(cfg, variant, out=None, seed=None, known_source_count=None):
    """Retrain the head without one component and evaluate it on the test split.

    Reuses the dataset and forward model of the base pipeline (generated on
    demand).  Writes ``<seed dir>/ablation_<variant>/`` and the aggregated
    ``<out>/ablation_<variant>.csv``.
    """
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {', '.join(ABLATIONS)}")
    out = out or cfg.output.dir
    echo_config(cfg, out)
    seeds = seeds_of(cfg, seed)
    fname = f"ablation_{variant}.csv"
    for s in seeds:
        run = Run(cfg, s, out, known_source_count)
        for stage in ("generate", "train-forward", "certify"):
            run_stage(run, stage)
        sub = run.path(f"ablation_{variant}")
        os.makedirs(sub, exist_ok=True)
        model, history = _train_localizer(run, variant)
        save_localizer(model, os.path.join(sub, "localizer.ckpt"))
        _write(os.path.join(sub, "localizer_history.json"), _json({"loss": history}))
        ds = run.dataset()
        res = localize(model, ds, known_source_count)
        _write(os.path.join(sub, "predictions.tsv"), format_predictions(res.scores, res.labels))
        row = metrics_row(f"IVGD[{variant}]", dataset_name(cfg), s, res.scores, res.labels, ds.sources("test"))
        write_metrics(run.path(fname), [row])
    rows = collect_metrics(out, seeds, fname)
    write_metrics(os.path.join(out, fname), rows)
    return rows
