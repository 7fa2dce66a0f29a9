import csv
import os

import pytest

from ivgd.cli import main
from ivgd.pipeline import METRIC_FIELDS, STAGES

TINY = """\
[cascade]
n_groups = 3
runs = 4
seeds = 0
split = sample
[forward]
epochs = 2
cert_samples = 2
[localizer]
K = 2
hidden = 8
epochs = 1
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_end_to_end_and_skip(cfg, tmp_path, capsys):
    out = str(tmp_path / "out")
    assert main(["pipeline", "--config", cfg, "--out", out]) == 0
    seed_dir = os.path.join(out, "seed_0")
    for name in ("dataset.jsonl", "forward.ckpt", "certificates.json", "inversion.json",
                 "localizer.ckpt", "ivgd_predictions.tsv", "ivgd_traces.jsonl",
                 "lpsi_predictions.tsv", "metrics.csv", "roc_ivgd.csv", "roc_lpsi.csv"):
        assert os.path.exists(os.path.join(seed_dir, name)), name
    rows = read_csv(os.path.join(out, "metrics.csv"))
    assert {r["method"] for r in rows} == {"IVGD", "LPSI"}
    assert list(rows[0]) == list(METRIC_FIELDS)
    first = open(os.path.join(out, "metrics.csv")).read()
    mtime = os.path.getmtime(os.path.join(seed_dir, "localizer.ckpt"))
    assert main(["pipeline", "--config", cfg, "--out", out]) == 0
    assert open(os.path.join(out, "metrics.csv")).read() == first
    assert os.path.getmtime(os.path.join(seed_dir, "localizer.ckpt")) == mtime


def test_deterministic_across_directories(cfg, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["pipeline", "--config", cfg, "--out", a]) == 0
    assert main(["pipeline", "--config", cfg, "--out", b]) == 0
    assert open(os.path.join(a, "metrics.csv")).read() == open(os.path.join(b, "metrics.csv")).read()


def test_stage_gating(cfg, tmp_path):
    out = str(tmp_path / "out")
    assert main(["pipeline", "--config", cfg, "--out", out, "--stage", "generate"]) == 0
    files = set(os.listdir(os.path.join(out, "seed_0")))
    assert "dataset.jsonl" in files and "forward.ckpt" not in files


def test_individual_commands(cfg, tmp_path, capsys):
    out = str(tmp_path / "out")
    for cmd in ("generate", "train-forward", "certify", "invert", "train-localizer", "localize"):
        assert main([cmd, "--config", cfg, "--out", out]) == 0, cmd
    assert main(["baseline", "lpsi", "--config", cfg, "--out", out]) == 0
    assert main(["evaluate", "--config", cfg, "--out", out]) == 0
    assert "up to date" in (main(["generate", "--config", cfg, "--out", out]) == 0 and capsys.readouterr().out)


def test_missing_artifact_names_stage(cfg, tmp_path, capsys):
    assert main(["localize", "--config", cfg, "--out", str(tmp_path / "empty")]) == 2
    assert "stage localize" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert main(["pipeline", "--config", str(tmp_path / "nope.ini")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[localizer]\nK = 0\n")
    assert main(["pipeline", "--config", str(bad)]) == 2
    assert main(["ablate", "--variant", "no_everything"]) == 2
    assert main(["frobnicate"]) == 2


def test_numeric_failure_exit_3(cfg, tmp_path, capsys):
    path = tmp_path / "lpsi.ini"
    path.write_text(TINY + "[lpsi]\nmax_iters = 1\ntol = 1e-300\n")
    assert main(["baseline", "lpsi", "--config", str(path), "--out", str(tmp_path / "o")]) == 2  # no dataset yet
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    assert main(["baseline", "lpsi", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "stage baseline-lpsi" in capsys.readouterr().err


@pytest.mark.parametrize("variant", ["no_inversion", "no_compensation", "no_validity"])
def test_ablation_csv(cfg, tmp_path, variant):
    out = str(tmp_path / "out")
    assert main(["ablate", "--config", cfg, "--out", out, "--variant", variant]) == 0
    rows = read_csv(os.path.join(out, f"ablation_{variant}.csv"))
    assert len(rows) == 1 and rows[0]["method"] == f"IVGD[{variant}]"
    assert list(rows[0]) == list(METRIC_FIELDS)


def test_known_source_count(cfg, tmp_path):
    out = str(tmp_path / "out")
    assert main(["pipeline", "--config", cfg, "--out", out, "--known-source-count", "4"]) == 0


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "pipeline" in capsys.readouterr().out


def test_stages_listed():
    assert STAGES[0] == "generate" and STAGES[-1] == "evaluate"
