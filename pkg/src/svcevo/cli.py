"""Command line pipeline over a run directory.

Stages read the previous stage's files and write their own, recording inputs,
outputs, parameters and a config hash in ``<run-dir>/manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import community, explain, features, forest, synth, temporal_graph, tracker

log = logging.getLogger("svcevo")


class StageError(Exception):
    """A stage cannot run: bad configuration or missing inputs."""


# ---------------------------------------------------------------------------
# run directory bookkeeping


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise StageError(f"missing input {path} ({hint})")
    return path


def _rel(run: Path, paths):
    out = []
    for p in paths:
        p = Path(p)
        try:
            out.append(str(p.relative_to(run)))
        except ValueError:
            out.append(str(p))
    return out


def _record(run: Path, stage: str, params: dict, inputs, outputs, seed=None) -> None:
    manifest_path = run / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"stages": {}}
    blob = json.dumps(params, sort_keys=True).encode()
    manifest["stages"][stage] = {
        "stage": stage,
        "inputs": _rel(run, inputs),
        "outputs": _rel(run, outputs),
        "params": params,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
    }
    manifest["stages"] = dict(sorted(manifest["stages"].items()))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _check_range(name, value, lo, hi=None, lo_open=False):
    bad = value <= lo if lo_open else value < lo
    if bad or (hi is not None and value > hi):
        raise StageError(f"--{name.replace('_', '-')} out of range: {value}")


def _validate(args) -> None:
    _check_range("alpha", args.alpha, 0.0, 1.0, lo_open=True)
    _check_range("beta", args.beta, 0.0, 1.0, lo_open=True)
    _check_range("period_days", args.period_days, 1)
    _check_range("min_community_size", args.min_community_size, 3)
    _check_range("trees", args.trees, 1)
    _check_range("threads", args.threads, 1)
    _check_range("resolution", args.resolution, 0.0, lo_open=True)
    _check_range("test_fraction", args.test_fraction, 0.0, 1.0, lo_open=True)
    _check_range("min_samples_leaf", args.min_samples_leaf, 1)
    _check_range("top_k", args.top_k, 1)
    if args.max_depth is not None:
        _check_range("max_depth", args.max_depth, 0)
    if args.features_per_split is not None:
        _check_range("features_per_split", args.features_per_split, 1)
    if args.dependence_feature not in features.FEATURE_NAMES:
        raise StageError(f"--dependence-feature must be one of {', '.join(features.FEATURE_NAMES)}")
    if args.dependence_class not in [e.value for e in tracker.PREDICTABLE]:
        raise StageError("--dependence-class must be a predictable event name")


# ---------------------------------------------------------------------------
# stages


def stage_synth(args) -> None:
    out = Path(args.out or (Path(args.run_dir) / "inputs" if args.run_dir else None) or "")
    if not str(out):
        raise StageError("synth needs --out or --run-dir")
    if args.script:
        script = synth.EvolutionScript.from_json(json.loads(Path(_require(Path(args.script), "script file")).read_text()))
    else:
        script = synth.default_script(seed=args.seed, n_communities=args.communities, n_snapshots=args.snapshots)
        script.period_days = args.period_days
    result = synth.generate(script)
    result.write(out)
    log.info("synth: %d entities, %d events -> %s", len(result.registry), len(result.events), out)


def stage_snapshot(args) -> None:
    run = Path(args.run_dir)
    inputs = run / "inputs"
    nodes = Path(args.nodes) if args.nodes else inputs / "nodes.csv"
    events_path = Path(args.events) if args.events else inputs / "events.csv"
    cfg_path = Path(args.config) if args.config else inputs / "mechanisms.cfg"
    for p, hint in ((nodes, "--nodes"), (events_path, "--events"), (cfg_path, "--config")):
        _require(p, hint)
    config = temporal_graph.load_mechanisms(cfg_path)
    registry = temporal_graph.load_entities(nodes)
    events = temporal_graph.load_events(events_path, registry)
    temporal_graph.validate_config(events, config)

    schedule = inputs / "schedule.json"
    start = temporal_graph.parse_timestamp(args.start) if args.start else None
    end = temporal_graph.parse_timestamp(args.end) if args.end else None
    if start is None and schedule.exists():
        meta = json.loads(schedule.read_text())
        start = temporal_graph.parse_timestamp(meta["start"])
        if end is None:
            end = start + timedelta(days=meta["period_days"] * (meta["n_snapshots"] - 1))
    if start is None or end is None:
        if not events:
            raise StageError("empty event log: pass --start and --end")
        start = start or events[0].timestamp
        end = end or events[-1].timestamp

    inputs.mkdir(parents=True, exist_ok=True)
    for src, name in ((nodes, "nodes.csv"), (events_path, "events.csv"), (cfg_path, "mechanisms.cfg")):
        if src.resolve() != (inputs / name).resolve():
            shutil.copyfile(src, inputs / name)

    snaps = temporal_graph.snapshot_series(events, registry, config, start, args.period_days, end)
    manifest = temporal_graph.write_snapshots(snaps, run / "snapshots")
    params = {"start": temporal_graph.format_timestamp(start), "end": temporal_graph.format_timestamp(end),
              "period_days": args.period_days}
    _record(run, "snapshot", params, [inputs / "nodes.csv", inputs / "events.csv", inputs / "mechanisms.cfg"],
            [manifest])
    log.info("snapshot: %d snapshots", len(snaps))


def stage_detect(args) -> None:
    run = Path(args.run_dir)
    manifest = _require(run / "snapshots" / "manifest.json", "run `snapshot` first")
    snaps = temporal_graph.read_snapshots(manifest.parent)
    parts = community.detect_all(snaps, seed=args.seed, resolution=args.resolution,
                                 min_size=args.min_community_size)
    out = community.write_partitions(parts, run / "communities")
    params = {"seed": args.seed, "resolution": args.resolution, "min_community_size": args.min_community_size}
    _record(run, "detect", params, [manifest], [out], seed=args.seed)
    log.info("detect: %s communities per snapshot", [len(p.communities) for p in parts])


def _load_partitions(run: Path):
    manifest = _require(run / "communities" / "manifest.json", "run `detect` first")
    return manifest, community.read_partitions(manifest.parent)


def stage_track(args) -> None:
    run = Path(args.run_dir)
    manifest, parts = _load_partitions(run)
    records = tracker.track(parts, tracker.TrackerConfig(args.alpha, args.beta))
    lineages = tracker.build_lineages(records, parts)
    out = run / "tracking"
    out.mkdir(parents=True, exist_ok=True)
    tracker.write_records(records, out / "events.json")
    tracker.write_event_distribution(tracker.event_distribution(records, max(len(parts) - 1, 0)),
                                     out / "event_distribution.csv")
    tracker.write_lineages(lineages, out / "lineages.json")
    _record(run, "track", {"alpha": args.alpha, "beta": args.beta}, [manifest],
            [out / "events.json", out / "event_distribution.csv", out / "lineages.json"])
    log.info("track: %d evolution records", len(records))


def stage_featurize(args) -> None:
    run = Path(args.run_dir)
    snap_manifest = _require(run / "snapshots" / "manifest.json", "run `snapshot` first")
    part_manifest, parts = _load_partitions(run)
    events_json = _require(run / "tracking" / "events.json", "run `track` first")
    nodes = _require(run / "inputs" / "nodes.csv", "run `snapshot` first")

    registry = temporal_graph.load_entities(nodes)
    snaps = temporal_graph.read_snapshots(snap_manifest.parent)
    records = tracker.read_records(events_json)
    lineages = tracker.build_lineages(records, parts)
    feats = features.featurize_all(snaps, parts, registry, cohesion_cap=args.cohesion_cap)
    summary: dict = {}
    samples = features.build_sequences(lineages, feats, records, delta=args.delta_features, summary=summary)
    last = snaps[-1].index if snaps else 0
    present = features.present_windows(lineages, feats, last, delta=args.delta_features)

    out = run / "features"
    out.mkdir(parents=True, exist_ok=True)
    features.write_samples(samples, out / "features.csv")
    features.write_samples(present, out / "present.csv")
    labels = [s.label.value for s in samples]
    if len(set(labels)) >= 2:
        train_idx, test_idx = forest.stratified_split(labels, args.test_fraction, args.seed)
    else:
        train_idx, test_idx = np.arange(len(labels)), np.arange(0)
    split = {"train": train_idx.tolist(), "test": test_idx.tolist(), "test_fraction": args.test_fraction,
             "seed": args.seed}
    (out / "split.json").write_text(json.dumps(split) + "\n", encoding="utf-8")
    counts = {e.value: labels.count(e.value) for e in tracker.PREDICTABLE}
    summary.update(n_train=len(train_idx), n_test=len(test_idx), label_counts=counts,
                   present_windows=len(present))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    params = {"delta_features": args.delta_features, "test_fraction": args.test_fraction, "seed": args.seed,
              "cohesion_cap": args.cohesion_cap}
    _record(run, "featurize", params, [snap_manifest, part_manifest, events_json, nodes],
            [out / "features.csv", out / "present.csv", out / "split.json", out / "summary.json"], seed=args.seed)
    print(f"featurize: {len(samples)} samples (train {len(train_idx)}, test {len(test_idx)}), "
          f"{len(present)} present windows")


def _load_dataset(run: Path):
    feats = _require(run / "features" / "features.csv", "run `featurize` first")
    split_path = _require(run / "features" / "split.json", "run `featurize` first")
    samples = features.read_samples(feats)
    split = json.loads(split_path.read_text())
    X = np.array([s.x for s in samples]).reshape(len(samples), len(features.SEQUENCE_COLUMNS))
    y = [s.label.value for s in samples]
    return feats, split_path, samples, X, y, np.array(split["train"], dtype=int), np.array(split["test"], dtype=int)


CLASSES = tuple(e.value for e in tracker.PREDICTABLE)


def stage_train(args) -> None:
    run = Path(args.run_dir)
    feats, split_path, _, X, y, tr, _ = _load_dataset(run)
    params = forest.Hyperparameters(
        n_trees=args.trees, max_depth=args.max_depth, min_samples_leaf=args.min_samples_leaf,
        features_per_split=args.features_per_split, seed=args.seed, class_weighting=args.class_weighting,
    )
    y_train = [y[i] for i in tr]
    try:
        model = forest.train(X[tr], y_train, params, classes=CLASSES, threads=args.threads)
        tree = forest.train_decision_tree(X[tr], y_train, params, classes=CLASSES)
    except forest.TrainingError as exc:
        raise StageError(f"cannot train: {exc}") from exc
    majority = forest.majority_baseline(y_train, CLASSES)
    out = run / "model"
    out.mkdir(parents=True, exist_ok=True)
    forest.save_forest(model, out / "forest.json")
    forest.save_forest(tree, out / "decision_tree.json")
    (out / "majority.json").write_text(json.dumps({"classes": list(CLASSES), "modal": majority.modal}) + "\n")
    _record(run, "train", {k: v for k, v in vars(args).items() if k in (
        "trees", "max_depth", "min_samples_leaf", "features_per_split", "seed", "class_weighting")},
        [feats, split_path], [out / "forest.json", out / "decision_tree.json", out / "majority.json"],
        seed=args.seed)
    log.info("train: %d trees on %d samples", args.trees, len(tr))


def _load_models(run: Path):
    model_dir = run / "model"
    rf = forest.load_forest(_require(model_dir / "forest.json", "run `train` first"))
    dt = forest.load_forest(_require(model_dir / "decision_tree.json", "run `train` first"))
    maj = json.loads(_require(model_dir / "majority.json", "run `train` first").read_text())
    return {"random_forest": rf, "decision_tree": dt,
            "majority": forest.MajorityClassifier(tuple(maj["classes"]), maj["modal"])}


def _fmt(v):
    return "" if v is None else repr(float(v))


def stage_evaluate(args) -> None:
    run = Path(args.run_dir)
    feats, split_path, _, X, y, _, te = _load_dataset(run)
    if len(te) == 0:
        raise StageError("empty test split; nothing to evaluate")
    models = _load_models(run)
    y_test = [y[i] for i in te]
    rows, conf_rows, summary = [], [], {}
    for name, model in models.items():
        m = forest.evaluate(model, X[te], y_test, CLASSES)
        summary[name] = {"macro_f1": m.macro_f1, "accuracy": m.accuracy}
        for c in CLASSES:
            rows.append([name, c, _fmt(m.precision[c]), _fmt(m.recall[c]), _fmt(m.f1[c]), m.support[c]])
        rows.append([name, "macro", "", "", _fmt(m.macro_f1), len(te)])
        for i, c in enumerate(CLASSES):
            conf_rows.append([name, c, *m.confusion[i].tolist()])
    summary["majority_macro_f1_closed_form"] = forest.majority_macro_f1(y_test, models["majority"].modal)
    out = run / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", ["model", "class", "precision", "recall", "f1", "support"], rows)
    _write_csv(out / "confusion.csv", ["model", "true", *CLASSES], conf_rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _record(run, "evaluate", {}, [feats, split_path, run / "model" / "forest.json"],
            [out / "metrics.csv", out / "confusion.csv", out / "summary.json"])
    for name, s in summary.items():
        if isinstance(s, dict):
            print(f"evaluate: {name:14s} macro-F1 {s['macro_f1']:.3f} accuracy {s['accuracy']:.3f}")


def stage_explain(args) -> None:
    run = Path(args.run_dir)
    feats, split_path, samples, X, y, tr, te = _load_dataset(run)
    present_path = _require(run / "features" / "present.csv", "run `featurize` first")
    rf = _load_models(run)["random_forest"]
    out = run / "explain"
    out.mkdir(parents=True, exist_ok=True)

    if len(tr) == 0:
        raise StageError("empty training split; nothing to explain")
    phi_train, base = explain.shap_values(rf, X[tr])
    explain.write_heatmap(explain.importance_from_phi(rf.classes, phi_train), out / "heatmap.csv")
    dep = explain.dependence_from_phi(rf.classes, X[tr], phi_train, [y[i] for i in tr],
                                      args.dependence_feature, args.dependence_class)
    explain.write_dependence(dep, out / "dependence.csv")

    explanations = []
    if len(te):
        phi_test, _ = explain.shap_values(rf, X[te])
        proba = rf.predict_proba(X[te])
        for k, i in enumerate(te):
            explanations.append({
                "lineage_id": samples[i].lineage_id, "t": samples[i].t, "label": y[i],
                "classes": {c: {"expected_value": float(base[j]), "prediction": float(proba[k, j]),
                                "phi": phi_test[k, :, j].tolist()} for j, c in enumerate(rf.classes)},
            })
    (out / "explanations.json").write_text(json.dumps(explanations) + "\n", encoding="utf-8")

    present = features.read_samples(present_path)
    if args.lineage:
        present = [p for p in present if p.lineage_id == args.lineage]
        if not present:
            raise StageError(f"lineage {args.lineage!r} has no window ending at the final snapshot")
    reports = [explain.decision_report(rf, p.x, top_k=args.top_k, lineage_id=p.lineage_id, t=p.t)
               for p in present]
    (out / "decision_report.json").write_text(json.dumps(reports, indent=1) + "\n", encoding="utf-8")
    params = {"top_k": args.top_k, "dependence_feature": args.dependence_feature,
              "dependence_class": args.dependence_class, "lineage": args.lineage}
    _record(run, "explain", params, [feats, split_path, present_path, run / "model" / "forest.json"],
            [out / "heatmap.csv", out / "dependence.csv", out / "explanations.json", out / "decision_report.json"])
    log.info("explain: %d test explanations, %d decision reports", len(explanations), len(reports))


def stage_report(args) -> None:
    run = Path(args.run_dir)
    snap_manifest = _require(run / "snapshots" / "manifest.json", "run `snapshot` first")
    part_manifest = _require(run / "communities" / "manifest.json", "run `detect` first")
    dist = _require(run / "tracking" / "event_distribution.csv", "run `track` first")
    explain_dir = run / "explain"
    copies = [_require(explain_dir / n, "run `explain` first")
              for n in ("heatmap.csv", "dependence.csv", "decision_report.json")]
    snaps = json.loads(snap_manifest.read_text())["snapshots"]
    parts = {p["index"]: p for p in json.loads(part_manifest.read_text())["partitions"]}
    out = run / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ecosystem_series.csv", ["snapshot", "time", "n_nodes", "n_edges", "n_communities"],
               [[s["index"], s["time"], s["n_nodes"], s["n_edges"], parts.get(s["index"], {}).get("n_communities", 0)]
                for s in snaps])
    shutil.copyfile(dist, out / "event_distribution.csv")
    for src in copies:
        shutil.copyfile(src, out / src.name)
    outputs = [out / n for n in ("ecosystem_series.csv", "event_distribution.csv", "heatmap.csv",
                                  "dependence.csv", "decision_report.json")]
    _record(run, "report", {}, [snap_manifest, part_manifest, dist, *copies], outputs)
    log.info("report: wrote %s", out)


PIPELINE = (
    ("snapshot", stage_snapshot),
    ("detect", stage_detect),
    ("track", stage_track),
    ("featurize", stage_featurize),
    ("train", stage_train),
    ("evaluate", stage_evaluate),
    ("explain", stage_explain),
    ("report", stage_report),
)


def stage_pipeline(args) -> None:
    run = Path(args.run_dir)
    if args.synth:
        args.out = str(run / "inputs")
        stage_synth(args)
    elif not (args.events or (run / "inputs" / "events.csv").exists()):
        raise StageError("pipeline needs --nodes/--events/--config or --synth")
    for _, fn in PIPELINE:
        fn(args)


# ---------------------------------------------------------------------------
# argument parsing


def _options() -> argparse.ArgumentParser:
    """Options shared by every subcommand; each stage reads the ones it needs."""
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline options")
    g.add_argument("--run-dir", help="run directory holding stage inputs and outputs")
    g.add_argument("--seed", type=int, default=0, help="random seed for detection, splitting, training (default 0)")
    g.add_argument("--threads", type=int, default=1, help="worker cap for tree training (default 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    g = p.add_argument_group("snapshot")
    g.add_argument("--nodes", help="nodes CSV (id,type)")
    g.add_argument("--events", help="events CSV (source,target,relation,timestamp)")
    g.add_argument("--config", help="mechanism config file")
    g.add_argument("--start", help="first snapshot instant, ISO-8601 UTC")
    g.add_argument("--end", help="last admissible snapshot instant, ISO-8601 UTC")
    g.add_argument("--period-days", type=int, default=30, help="days between snapshots (default 30)")

    g = p.add_argument_group("detect")
    g.add_argument("--min-community-size", type=int, default=community.DEFAULT_MIN_SIZE,
                   help="smallest community kept (default 4)")
    g.add_argument("--resolution", type=float, default=1.0, help="modularity resolution (default 1.0)")

    g = p.add_argument_group("track")
    g.add_argument("--alpha", type=float, default=0.5, help="forward inclusion threshold (default 0.5)")
    g.add_argument("--beta", type=float, default=0.5, help="backward inclusion threshold (default 0.5)")

    g = p.add_argument_group("featurize")
    g.add_argument("--delta-features", action="store_true",
                   help="encode the two later steps as differences from the step before")
    g.add_argument("--test-fraction", type=float, default=0.2, help="stratified test share (default 0.2)")
    g.add_argument("--cohesion-cap", type=float, default=features.DEFAULT_COHESION_CAP,
                   help="cohesion when a community has no external edges (default 1e6)")

    g = p.add_argument_group("train")
    g.add_argument("--trees", type=int, default=100, help="number of trees (default 100)")
    g.add_argument("--max-depth", type=int, default=None, help="tree depth limit (default unlimited)")
    g.add_argument("--min-samples-leaf", type=int, default=2, help="minimum samples per leaf (default 2)")
    g.add_argument("--features-per-split", type=int, default=None,
                   help="candidate features per split (default floor(sqrt(45)) = 6)")
    g.add_argument("--class-weighting", choices=("balanced", "none"), default="balanced",
                   help="sample weighting by class (default balanced)")

    g = p.add_argument_group("explain")
    g.add_argument("--top-k", type=int, default=5, help="contributors listed per event (default 5)")
    g.add_argument("--dependence-feature", default="activity_mean", help="feature for the dependence table")
    g.add_argument("--dependence-class", default="dissolving", help="event for the dependence table")
    g.add_argument("--lineage", help="restrict decision reports to one lineage id")

    g = p.add_argument_group("synth")
    g.add_argument("--out", help="output directory for generated inputs")
    g.add_argument("--script", help="evolution script JSON (default: built-in benchmark)")
    g.add_argument("--communities", type=int, default=12, help="benchmark community count (default 12)")
    g.add_argument("--snapshots", type=int, default=10, help="benchmark snapshot count (default 10)")
    g.add_argument("--synth", action="store_true", help="pipeline: generate benchmark inputs first")
    return p


COMMANDS = {
    "synth": (stage_synth, "generate a synthetic ecosystem with a scripted lifecycle"),
    "snapshot": (stage_snapshot, "build weighted snapshots from the event log"),
    "detect": (stage_detect, "detect communities in every snapshot"),
    "track": (stage_track, "classify community evolution events between snapshots"),
    "featurize": (stage_featurize, "compute community features and training sequences"),
    "train": (stage_train, "train the forest and the baseline models"),
    "evaluate": (stage_evaluate, "score models on the test split"),
    "explain": (stage_explain, "Shapley attributions, heatmap, dependence and decision reports"),
    "report": (stage_report, "collect plot-ready report files"),
    "pipeline": (stage_pipeline, "run every stage in order"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svcevo", description="Service community evolution analysis")
    sub = parser.add_subparsers(dest="command", required=True)
    shared = _options()
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[shared], help=help_text, description=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        _validate(args)
        if args.command != "synth" and not args.run_dir:
            raise StageError("--run-dir is required")
        fn(args)
    except (StageError, FileNotFoundError, temporal_graph.InputError, synth.ScriptError) as exc:
        print(f"svcevo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
