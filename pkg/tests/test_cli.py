import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from svcevo.cli import COMMANDS, main

ARTIFACTS = [
    "inputs/nodes.csv", "inputs/events.csv", "inputs/mechanisms.cfg", "inputs/schedule.json",
    "snapshots/manifest.json", "communities/manifest.json",
    "tracking/events.json", "tracking/event_distribution.csv", "tracking/lineages.json",
    "features/features.csv", "features/present.csv", "features/split.json", "features/summary.json",
    "model/forest.json", "model/decision_tree.json", "model/majority.json",
    "metrics/metrics.csv", "metrics/confusion.csv", "metrics/summary.json",
    "explain/heatmap.csv", "explain/dependence.csv", "explain/explanations.json", "explain/decision_report.json",
    "report/ecosystem_series.csv", "report/event_distribution.csv", "report/heatmap.csv",
    "report/dependence.csv", "report/decision_report.json",
    "manifest.json",
]


def tree_bytes(root: Path, skip=("inputs",)):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.relative_to(root).parts[0] not in skip}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--synth", "--run-dir", str(d), "--trees", "40"]) == 0
    return d


def test_pipeline_artifacts(run):
    for rel in ARTIFACTS:
        p = run / rel
        assert p.is_file() and p.stat().st_size > 0, rel
    rows = list(csv.DictReader((run / "metrics" / "metrics.csv").open()))
    assert {r["model"] for r in rows} == {"random_forest", "decision_tree", "majority"}
    assert any(r["class"] == "macro" for r in rows)
    stages = json.loads((run / "manifest.json").read_text())["stages"]
    assert {"snapshot", "detect", "track", "featurize", "train", "evaluate", "explain", "report"} <= set(stages)
    for entry in stages.values():
        assert len(entry["config_hash"]) == 64


def test_report_series(run):
    rows = list(csv.DictReader((run / "report" / "ecosystem_series.csv").open()))
    assert list(rows[0]) == ["snapshot", "time", "n_nodes", "n_edges", "n_communities"]
    assert len(rows) == json.loads((run / "inputs" / "schedule.json").read_text())["n_snapshots"]
    assert all(int(r["n_communities"]) > 0 for r in rows)


def test_featurize_summary(run):
    s = json.loads((run / "features" / "summary.json").read_text())
    assert s["samples"] == s["n_train"] + s["n_test"] > 0
    split = json.loads((run / "features" / "split.json").read_text())
    assert set(split["train"]).isdisjoint(split["test"])


def test_rerun_is_idempotent(run, tmp_path):
    before = tree_bytes(run)
    assert main(["pipeline", "--run-dir", str(run), "--trees", "40"]) == 0
    assert tree_bytes(run) == before


def test_train_same_seed_byte_identical(run):
    model = run / "model" / "forest.json"
    assert main(["train", "--run-dir", str(run), "--seed", "7", "--trees", "10"]) == 0
    first = model.read_bytes()
    assert main(["train", "--run-dir", str(run), "--seed", "7", "--trees", "10"]) == 0
    assert model.read_bytes() == first
    # restore the module-level model for the other tests
    assert main(["train", "--run-dir", str(run), "--trees", "40"]) == 0


def test_detect_without_snapshots(tmp_path, capsys):
    assert main(["detect", "--run-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "snapshots/manifest.json" in err and "snapshot" in err


@pytest.mark.parametrize("argv,needle", [
    (["--alpha", "0"], "alpha"),
    (["--beta", "1.5"], "beta"),
    (["--trees", "0"], "trees"),
    (["--test-fraction", "1.2"], "--test-fraction"),
    (["--dependence-feature", "nope"], "dependence-feature"),
])
def test_config_validation(tmp_path, capsys, argv, needle):
    assert main(["track", "--run-dir", str(tmp_path), *argv]) == 2
    assert needle in capsys.readouterr().err


def test_run_dir_required(capsys):
    assert main(["detect"]) == 2
    assert "--run-dir" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_lists_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--run-dir", "--seed", "--threads", "--alpha", "--beta", "--trees", "--top-k"):
        assert flag in out


def test_snapshot_from_explicit_inputs(tmp_path):
    src = tmp_path / "src"
    assert main(["synth", "--out", str(src), "--communities", "4", "--snapshots", "4"]) == 0
    run = tmp_path / "run"
    argv = ["snapshot", "--run-dir", str(run), "--nodes", str(src / "nodes.csv"),
            "--events", str(src / "events.csv"), "--config", str(src / "mechanisms.cfg")]
    assert main(argv) == 0
    manifest = json.loads((run / "snapshots" / "manifest.json").read_text())
    assert len(manifest["snapshots"]) == 4


def test_lineage_filter(run):
    reports = json.loads((run / "explain" / "decision_report.json").read_text())
    assert reports
    lid = reports[0]["lineage_id"]
    assert main(["explain", "--run-dir", str(run), "--lineage", lid]) == 0
    only = json.loads((run / "explain" / "decision_report.json").read_text())
    assert [r["lineage_id"] for r in only] == [lid]
    for r in only:
        assert sum(e["probability"] for e in r["events"].values()) == pytest.approx(1.0, abs=1e-12)
    assert main(["explain", "--run-dir", str(run)]) == 0


def test_pure_numpy_fallback(tmp_path):
    """With the compiled kernels switched off the pipeline writes the same bytes."""
    jit_dir, np_dir = tmp_path / "jit", tmp_path / "numpy"
    assert main(["pipeline", "--synth", "--run-dir", str(jit_dir), "--trees", "10"]) == 0
    env = dict(os.environ, SVCEVO_DISABLE_NUMBA="1")
    code = ("import sys; from svcevo import _accel; from svcevo.cli import main; "
            "assert not _accel.NUMBA_ENABLED; "
            f"sys.exit(main(['pipeline', '--synth', '--run-dir', {str(np_dir)!r}, '--trees', '10']))")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, timeout=600)
    assert res.returncode == 0, res.stderr[-2000:]
    assert tree_bytes(np_dir, skip=()) == tree_bytes(jit_dir, skip=())
