"""Entity/event inputs and snapshot materialisation.

A snapshot at instant ``T`` replays every interaction with ``t <= T`` in
timestamp order onto an undirected weighted graph. Each relation type carries
a mechanism and an impact:

* stability: ``w += impact``
* mutation: ``w = impact`` (history discarded)
* aging: ``w += impact * aging_coeff(T, t)``

Edges left with non-positive weight are dropped, then isolated nodes.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class InputError(ValueError):
    """Malformed or inconsistent input file."""


class EntityKind(str, enum.Enum):
    SERVICE = "service"
    STAKEHOLDER = "stakeholder"


class Mechanism(str, enum.Enum):
    STABILITY = "stability"
    AGING = "aging"
    MUTATION = "mutation"


_MECH_CODE = {
    Mechanism.STABILITY: kernels.STABILITY,
    Mechanism.AGING: kernels.AGING,
    Mechanism.MUTATION: kernels.MUTATION,
}


@dataclass(frozen=True)
class Entity:
    id: str
    kind: EntityKind


@dataclass(frozen=True)
class InteractionEvent:
    u: str
    v: str
    relation: str
    timestamp: datetime


@dataclass(frozen=True)
class RelationRule:
    mechanism: Mechanism
    impact: float


@dataclass(frozen=True)
class MechanismConfig:
    relations: Mapping[str, RelationRule] = field(default_factory=dict)
    aging_period_days: int = 30
    aging_max_days: int = 365
    default: RelationRule | None = None

    def __post_init__(self):
        if self.aging_period_days < 1:
            raise InputError("aging_period_days must be >= 1")
        if self.aging_max_days < self.aging_period_days:
            raise InputError("aging_max_days must be >= aging_period_days")

    def rule(self, relation: str) -> RelationRule:
        try:
            return self.relations[relation]
        except KeyError:
            if self.default is None:
                raise InputError(f"no mechanism configured for relation {relation!r}") from None
            return self.default


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Weighted undirected graph observed at ``time``.

    ``edges`` maps canonically ordered pairs ``(u, v)`` with ``u < v`` to weights.
    """

    index: int
    time: datetime
    nodes: tuple[str, ...]
    edges: Mapping[tuple[str, str], float]

    def __post_init__(self):
        object.__setattr__(self, "edges", MappingProxyType(dict(self.edges)))

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            self.index == other.index
            and self.time == other.time
            and self.nodes == other.nodes
            and dict(self.edges) == dict(other.edges)
        )

    def weight(self, u: str, v: str) -> float:
        key = (u, v) if u < v else (v, u)
        return self.edges.get(key, 0.0)

    def adjacency(self) -> dict[str, dict[str, float]]:
        adj: dict[str, dict[str, float]] = {n: {} for n in self.nodes}
        for (u, v), w in self.edges.items():
            adj[u][v] = w
            adj[v][u] = w
        return adj

    def weighted_degree(self) -> dict[str, float]:
        deg = dict.fromkeys(self.nodes, 0.0)
        for (u, v), w in self.edges.items():
            deg[u] += w
            deg[v] += w
        return deg

    def csr(self, weighted: bool = True):
        """Symmetric CSR arrays (indptr, indices, weights) in ``self.nodes`` order."""
        pos = {n: i for i, n in enumerate(self.nodes)}
        n = len(self.nodes)
        m = len(self.edges)
        src = np.empty(2 * m, dtype=np.int64)
        dst = np.empty(2 * m, dtype=np.int64)
        wts = np.empty(2 * m)
        for k, ((u, v), w) in enumerate(self.edges.items()):
            iu, iv = pos[u], pos[v]
            src[2 * k], dst[2 * k], wts[2 * k] = iu, iv, w
            src[2 * k + 1], dst[2 * k + 1], wts[2 * k + 1] = iv, iu, w
        order = np.lexsort((dst, src))
        src, dst, wts = src[order], dst[order], wts[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)
        if not weighted:
            wts = np.ones_like(wts)
        return indptr, dst, wts


# ---------------------------------------------------------------------------
# input parsing


def parse_timestamp(text: str) -> datetime:
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    ts = datetime.fromisoformat(raw)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _read_rows(path, header: Sequence[str]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, expected header {','.join(header)}") from None
        if [c.strip() for c in first] != list(header):
            raise InputError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def load_entities(path) -> dict[str, Entity]:
    registry: dict[str, Entity] = {}
    for line, (eid, kind) in _read_rows(path, ("id", "type")):
        if not eid:
            raise InputError(f"{path}:{line}: empty id")
        try:
            k = EntityKind(kind)
        except ValueError:
            raise InputError(f"{path}:{line}: unknown type {kind!r}") from None
        if eid in registry:
            raise InputError(f"{path}:{line}: duplicate id {eid!r}")
        registry[eid] = Entity(eid, k)
    return registry


def load_events(path, registry: Mapping[str, Entity]) -> list[InteractionEvent]:
    events = []
    for line, (u, v, rel, ts) in _read_rows(path, ("source", "target", "relation", "timestamp")):
        for eid in (u, v):
            if eid not in registry:
                raise InputError(f"{path}:{line}: unknown entity id {eid!r}")
        if u == v:
            raise InputError(f"{path}:{line}: self interaction on {u!r}")
        try:
            stamp = parse_timestamp(ts)
        except ValueError:
            raise InputError(f"{path}:{line}: malformed timestamp {ts!r}") from None
        events.append(InteractionEvent(u, v, rel, stamp))
    return sort_events(events)


def sort_events(events: Iterable[InteractionEvent]) -> list[InteractionEvent]:
    return sorted(events, key=lambda e: e.timestamp)


def load_mechanisms(path) -> MechanismConfig:
    """Parse ``key = value`` lines; relation values are ``<mechanism> <impact>``.

    ``*`` names the default rule; ``#`` starts a comment.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing mechanism config: {path}")
    relations: dict[str, RelationRule] = {}
    default = None
    params = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise InputError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in text.split("=", 1))
        if key in ("aging_period_days", "aging_max_days"):
            try:
                params[key] = int(value)
            except ValueError:
                raise InputError(f"{path}:{n}: {key} must be an integer") from None
            continue
        parts = value.split()
        if len(parts) != 2:
            raise InputError(f"{path}:{n}: expected '<mechanism> <impact>' for {key!r}")
        try:
            rule = RelationRule(Mechanism(parts[0]), float(parts[1]))
        except ValueError:
            raise InputError(f"{path}:{n}: bad rule {value!r}") from None
        if not math.isfinite(rule.impact):
            raise InputError(f"{path}:{n}: impact must be finite")
        if key == "*":
            default = rule
        else:
            relations[key] = rule
    return MechanismConfig(relations=relations, default=default, **params)


def write_mechanisms(config: MechanismConfig, path) -> None:
    lines = [
        f"aging_period_days = {config.aging_period_days}",
        f"aging_max_days = {config.aging_max_days}",
    ]
    for rel in sorted(config.relations):
        rule = config.relations[rel]
        lines.append(f"{rel} = {rule.mechanism.value} {rule.impact!r}")
    if config.default is not None:
        lines.append(f"* = {config.default.mechanism.value} {config.default.impact!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def validate_config(events: Sequence[InteractionEvent], config: MechanismConfig) -> None:
    for rel in sorted({e.relation for e in events}):
        config.rule(rel)


# ---------------------------------------------------------------------------
# snapshots


def aging_coeff(t_i: datetime, t_j: datetime, config: MechanismConfig) -> float:
    """Linear decay of an interaction at ``t_j`` observed at ``t_i``."""
    if t_i < t_j:
        raise ValueError("aging_coeff requires t_i >= t_j")
    gap = (t_i - t_j).total_seconds() / kernels.SECONDS_PER_DAY
    if gap < config.aging_max_days:
        return 1.0 / max(gap / config.aging_period_days, 1.0)
    return 0.0


class EventTable:
    """Column view of a sorted event log, reused across snapshot builds."""

    def __init__(self, events: Sequence[InteractionEvent], config: MechanismConfig):
        validate_config(events, config)
        self.config = config
        keys: dict[tuple[str, str], int] = {}
        n = len(events)
        self.pair = np.empty(n, dtype=np.int64)
        self.mech = np.empty(n, dtype=np.int64)
        self.impact = np.empty(n)
        self.t = np.empty(n)
        prev = -math.inf
        for k, e in enumerate(events):
            key = (e.u, e.v) if e.u < e.v else (e.v, e.u)
            self.pair[k] = keys.setdefault(key, len(keys))
            rule = config.rule(e.relation)
            self.mech[k] = _MECH_CODE[rule.mechanism]
            self.impact[k] = rule.impact
            self.t[k] = e.timestamp.timestamp()
            if self.t[k] < prev:
                raise ValueError("events must be sorted ascending by timestamp")
            prev = self.t[k]
        self.pairs = list(keys)

    def weights_at(self, when: datetime) -> np.ndarray:
        return kernels.accumulate_weights(
            self.pair, self.mech, self.impact, self.t, when.timestamp(), len(self.pairs),
            float(self.config.aging_period_days), float(self.config.aging_max_days),
        )


def build_snapshot(events, registry, config: MechanismConfig, when: datetime, index: int = 0,
                   table: EventTable | None = None) -> Snapshot:
    if table is None:
        table = EventTable(events, config)
    w = table.weights_at(when)
    edges = {}
    for k in np.flatnonzero(w > 0.0):
        u, v = table.pairs[k]
        if u not in registry or v not in registry:
            raise InputError(f"edge ({u}, {v}) references an unregistered entity")
        edges[(u, v)] = float(w[k])
    edges = dict(sorted(edges.items()))
    nodes = tuple(sorted({n for pair in edges for n in pair}))
    return Snapshot(index=index, time=when, nodes=nodes, edges=edges)


def snapshot_grid(start: datetime, period_days: int, end: datetime) -> list[datetime]:
    if period_days < 1:
        raise ValueError("period_days must be >= 1")
    if not start < end:
        raise ValueError("start must precede end")
    grid = []
    step = timedelta(days=period_days)
    t = start
    while t <= end:
        grid.append(t)
        t = t + step
    return grid


def snapshot_series(events, registry, config, start: datetime, period_days: int, end: datetime) -> list[Snapshot]:
    table = EventTable(events, config)
    return [
        build_snapshot(events, registry, config, t, index=i, table=table)
        for i, t in enumerate(snapshot_grid(start, period_days, end))
    ]


# ---------------------------------------------------------------------------
# snapshot files


def snapshot_filename(index: int) -> str:
    return f"snapshot_{index:03d}.csv"


def write_snapshots(snapshots: Sequence[Snapshot], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in snapshots:
        name = snapshot_filename(s.index)
        with (out_dir / name).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "weight"])
            for (u, v), wt in s.edges.items():
                w.writerow([u, v, f"{wt:.9g}"])
        entries.append({"index": s.index, "time": format_timestamp(s.time), "file": name,
                        "n_nodes": len(s.nodes), "n_edges": len(s.edges)})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"snapshots": entries}, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_snapshots(out_dir) -> list[Snapshot]:
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"missing snapshot manifest: {manifest}")
    entries = json.loads(manifest.read_text(encoding="utf-8"))["snapshots"]
    snaps = []
    for entry in entries:
        edges = {}
        for _, (u, v, wt) in _read_rows(out_dir / entry["file"], ("u", "v", "weight")):
            key = (u, v) if u < v else (v, u)
            edges[key] = float(wt)
        edges = dict(sorted(edges.items()))
        nodes = tuple(sorted({n for pair in edges for n in pair}))
        snaps.append(Snapshot(entry["index"], parse_timestamp(entry["time"]), nodes, edges))
    return snaps


def write_entities(registry: Mapping[str, Entity], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "type"])
        for e in registry.values():
            w.writerow([e.id, e.kind.value])


def write_events(events: Sequence[InteractionEvent], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "relation", "timestamp"])
        for e in events:
            w.writerow([e.u, e.v, e.relation, format_timestamp(e.timestamp)])
