"""Community feature vectors and three-step training sequences."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .community import Community, Partition
from .temporal_graph import Entity, EntityKind, Snapshot
from .tracker import LINKING, EventType, EvolutionRecord, Lineages

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "size",
    "density",
    "clustering",
    "avg_closeness",
    "degree",
    "leadership",
    "cohesion",
    "n_key_nodes",
    "activity_max",
    "activity_sum",
    "activity_mean",
    "pct_service",
    "pct_stakeholder",
    "k_degree",
    "k_avg_closeness",
)
N_FEATURES = len(FEATURE_NAMES)
TIMESTEPS = ("tm2", "tm1", "t0")
SEQUENCE_COLUMNS = tuple(f"{p}_{f}" for p in TIMESTEPS for f in FEATURE_NAMES)
DEFAULT_COHESION_CAP = 1e6

# label choice when a community is a predecessor in several records
_LABEL_PRIORITY = (
    EventType.SPLITTING,
    EventType.MERGING,
    EventType.DISSOLVING,
    EventType.SHRINKING,
    EventType.GROWING,
    EventType.CONTINUING,
)


@dataclass(frozen=True)
class SnapshotMetrics:
    """Whole-snapshot node quantities shared by every community in it."""

    weighted_degree: Mapping[str, float]
    closeness: Mapping[str, float]
    clustering: Mapping[str, float]
    adjacency: Mapping[str, Mapping[str, float]]
    n_nodes: int

    @classmethod
    def of(cls, snapshot: Snapshot) -> "SnapshotMetrics":
        indptr, indices, _ = snapshot.csr(weighted=False)
        cl = kernels.closeness(indptr, indices)
        cc = kernels.clustering(indptr, indices)
        nodes = snapshot.nodes
        return cls(
            weighted_degree=snapshot.weighted_degree(),
            closeness={n: float(cl[i]) for i, n in enumerate(nodes)},
            clustering={n: float(cc[i]) for i, n in enumerate(nodes)},
            adjacency=snapshot.adjacency(),
            n_nodes=len(nodes),
        )


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def extract_features(community: Community, snapshot: Snapshot, registry: Mapping[str, Entity],
                     metrics: SnapshotMetrics | None = None,
                     cohesion_cap: float = DEFAULT_COHESION_CAP) -> np.ndarray:
    """The 15 community features, in ``FEATURE_NAMES`` order."""
    if metrics is None:
        metrics = SnapshotMetrics.of(snapshot)
    members = sorted(community.members)
    missing = [x for x in members if x not in metrics.adjacency]
    if missing:
        raise ValueError(f"community {community.id} has members outside the snapshot: {missing[:5]}")
    inside = set(members)
    n = len(members)
    big_n = metrics.n_nodes

    internal = []
    external = 0.0
    for x in members:
        for y, w in metrics.adjacency[x].items():
            if y in inside:
                if x < y:
                    internal.append(w)
            else:
                external += w
    wd = metrics.weighted_degree
    keys = sorted(community.key_nodes)

    internal_sum = sum(internal)
    if external > 0.0 and n > 1:
        cohesion = (2.0 * internal_sum / ((n - 1) * n)) / (external / (big_n * (big_n - n)))
    else:
        cohesion = cohesion_cap if internal_sum > 0.0 else 0.0

    kinds = [registry[x].kind for x in members]
    return np.array([
        n,
        2.0 * len(internal) / (n * (n - 1)) if n > 1 else 0.0,
        _mean(metrics.clustering[x] for x in members),
        _mean(metrics.closeness[x] for x in members),
        _mean(wd[x] for x in members),
        max(wd[x] for x in members) / ((n - 1) * (n - 2)) if n > 2 else 0.0,
        cohesion,
        len(keys),
        max(internal) if internal else 0.0,
        internal_sum,
        internal_sum / len(internal) if internal else 0.0,
        kinds.count(EntityKind.SERVICE) / n,
        kinds.count(EntityKind.STAKEHOLDER) / n,
        _mean(wd[x] for x in keys),
        _mean(metrics.closeness[x] for x in keys),
    ], dtype=float)


def featurize_all(snapshots: Sequence[Snapshot], partitions: Sequence[Partition],
                  registry: Mapping[str, Entity], cohesion_cap: float = DEFAULT_COHESION_CAP) -> dict[str, np.ndarray]:
    out = {}
    snap_by_index = {s.index: s for s in snapshots}
    for p in partitions:
        if not p.communities:
            continue
        snap = snap_by_index[p.snapshot_index]
        metrics = SnapshotMetrics.of(snap)
        for c in p.communities:
            out[c.id] = extract_features(c, snap, registry, metrics, cohesion_cap)
    return out


# ---------------------------------------------------------------------------
# sequences


@dataclass(frozen=True)
class SequenceSample:
    x: np.ndarray
    label: EventType | None
    lineage_id: str
    t: int
    community_id: str


def community_labels(records: Sequence[EvolutionRecord], lineages: Lineages) -> dict[str, EventType]:
    """Next evolution event of every community that has one."""
    successor = {c1: c2 for c2, c1 in lineages.predecessor.items()}
    events: dict[str, list[EvolutionRecord]] = {}
    for r in records:
        for c in r.predecessors:
            events.setdefault(c, []).append(r)
    labels = {}
    for c, recs in events.items():
        nxt = successor.get(c)
        link = [r for r in recs if r.event in LINKING and nxt in r.successors]
        if link:
            labels[c] = link[0].event
            continue
        present = {r.event for r in recs}
        labels[c] = next(e for e in _LABEL_PRIORITY if e in present)
    return labels


def _window(chain_feats, delta: bool) -> np.ndarray:
    f2, f1, f0 = chain_feats
    if delta:
        return np.concatenate([f2, f1 - f2, f0 - f1])
    return np.concatenate([f2, f1, f0])


def build_sequences(lineages: Lineages, features: Mapping[str, np.ndarray],
                    records: Sequence[EvolutionRecord], delta: bool = False,
                    summary: dict | None = None) -> list[SequenceSample]:
    labels = community_labels(records, lineages)
    samples = []
    short = unlabeled = 0
    for lid in sorted(lineages.chains):
        chain = lineages.chains[lid]
        if len(chain) < 3:
            short += 1
            continue
        for j in range(2, len(chain)):
            c = chain[j]
            label = labels.get(c)
            if label is None:
                unlabeled += 1
                continue
            x = _window([features[chain[j - 2]], features[chain[j - 1]], features[c]], delta)
            samples.append(SequenceSample(x, label, lid, lineages.snapshot_of[c], c))
    if summary is not None:
        summary.update(samples=len(samples), short_lineages=short, unlabeled_windows=unlabeled)
    log.info("built %d sequence samples (%d short lineages, %d unlabeled windows)",
             len(samples), short, unlabeled)
    return samples


def present_windows(lineages: Lineages, features: Mapping[str, np.ndarray], last_index: int,
                    delta: bool = False) -> list[SequenceSample]:
    """Unlabeled windows ending at the final snapshot, for forward prediction."""
    out = []
    for lid in sorted(lineages.chains):
        chain = lineages.chains[lid]
        if len(chain) >= 3 and lineages.snapshot_of[chain[-1]] == last_index:
            x = _window([features[c] for c in chain[-3:]], delta)
            out.append(SequenceSample(x, None, lid, last_index, chain[-1]))
    return out


def write_samples(samples: Sequence[SequenceSample], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lineage_id", "t", "label", *SEQUENCE_COLUMNS])
        for s in samples:
            w.writerow([s.lineage_id, s.t, s.label.value if s.label else "", *(repr(float(v)) for v in s.x)])


def read_samples(path) -> list[SequenceSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing features file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["lineage_id", "t", "label", *SEQUENCE_COLUMNS]
        if header != expected:
            raise ValueError(f"{path}: unexpected header")
        out = []
        for row in reader:
            x = np.array([float(v) for v in row[3:]])
            label = EventType(row[2]) if row[2] else None
            out.append(SequenceSample(x, label, row[0], int(row[1]), ""))
        return out
