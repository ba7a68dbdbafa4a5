"""Community matching across consecutive snapshots.

Pairs of overlapping communities are scored with the inclusion measure in both
directions and classified into one of seven evolution events. The rule set:

For a pair (C1 at t, C2 at t+1) with F = I(C1, C2), B = I(C2, C1):

* splitting: F < alpha and B >= beta for two or more C2 of one C1
* merging: F >= alpha and B < beta for two or more C1 of one C2
* continuing / growing / shrinking: F >= alpha and B >= beta, by size
* growing: F >= alpha, B < beta, |C1| <= |C2|, C2 is C1's only match
* shrinking: F < alpha, B >= beta, |C1| >= |C2|, C1 is C2's only match
* any other matched pair falls back to a size comparison
* dissolving / forming: no match on either threshold

Multi-match events are resolved first; their pairs are not re-emitted.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .community import Community, Partition


class EventType(str, enum.Enum):
    FORMING = "forming"
    CONTINUING = "continuing"
    GROWING = "growing"
    SHRINKING = "shrinking"
    SPLITTING = "splitting"
    MERGING = "merging"
    DISSOLVING = "dissolving"


# classifier label space; forming has no history to predict from
PREDICTABLE = (
    EventType.CONTINUING,
    EventType.GROWING,
    EventType.SHRINKING,
    EventType.SPLITTING,
    EventType.MERGING,
    EventType.DISSOLVING,
)
LINKING = (EventType.CONTINUING, EventType.GROWING, EventType.SHRINKING)


@dataclass(frozen=True)
class TrackerConfig:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")


@dataclass(frozen=True)
class EvolutionRecord:
    from_snapshot: int
    event: EventType
    predecessors: tuple[str, ...]
    successors: tuple[str, ...]
    inclusions: Mapping[tuple[str, str], tuple[float, float]] = field(default_factory=dict, compare=False)


def inclusion(c1: Community, c2: Community) -> float:
    """Share of ``c1`` found in ``c2``, weighted by ``c1``'s social positions."""
    common = c1.members & c2.members
    if not common:
        return 0.0
    sp = c1.social_position
    total = sum(sp[x] for x in sorted(c1.members))
    part = sum(sp[x] for x in sorted(common))
    return (len(common) / len(c1.members)) * (part / total)


def _by_size(n1: int, n2: int) -> EventType:
    if n1 < n2:
        return EventType.GROWING
    if n1 > n2:
        return EventType.SHRINKING
    return EventType.CONTINUING


def classify_transition(part_t: Partition, part_t1: Partition,
                        config: TrackerConfig = TrackerConfig()) -> list[EvolutionRecord]:
    a, b = config.alpha, config.beta
    t = part_t.snapshot_index
    prev = part_t.communities
    nxt = part_t1.communities
    size = {c.id: len(c) for c in (*prev, *nxt)}

    scores: dict[tuple[str, str], tuple[float, float]] = {}
    for c1 in prev:
        for c2 in nxt:
            if c1.members & c2.members:
                scores[(c1.id, c2.id)] = (inclusion(c1, c2), inclusion(c2, c1))

    def matched(key):
        f, bw = scores[key]
        return f >= a or bw >= b

    fwd = {c.id: [c2.id for c2 in nxt if (c.id, c2.id) in scores and matched((c.id, c2.id))] for c in prev}
    bwd = {c.id: [c1.id for c1 in prev if (c1.id, c.id) in scores and matched((c1.id, c.id))] for c in nxt}

    records: list[EvolutionRecord] = []
    consumed: set[tuple[str, str]] = set()

    for c1 in prev:
        parts = [c2 for c2 in fwd[c1.id] if scores[(c1.id, c2)][0] < a and scores[(c1.id, c2)][1] >= b]
        if len(parts) >= 2:
            keys = [(c1.id, c2) for c2 in parts]
            consumed.update(keys)
            records.append(EvolutionRecord(t, EventType.SPLITTING, (c1.id,), tuple(parts),
                                           {k: scores[k] for k in keys}))
    for c2 in nxt:
        parts = [c1 for c1 in bwd[c2.id] if scores[(c1, c2.id)][0] >= a and scores[(c1, c2.id)][1] < b]
        if len(parts) >= 2:
            keys = [(c1, c2.id) for c1 in parts]
            consumed.update(keys)
            records.append(EvolutionRecord(t, EventType.MERGING, tuple(parts), (c2.id,),
                                           {k: scores[k] for k in keys}))

    for key in scores:
        if key in consumed or not matched(key):
            continue
        c1, c2 = key
        f, bw = scores[key]
        n1, n2 = size[c1], size[c2]
        if f >= a and bw >= b:
            event = _by_size(n1, n2)
        elif f >= a and n1 <= n2 and fwd[c1] == [c2]:
            event = EventType.GROWING
        elif bw >= b and n1 >= n2 and bwd[c2] == [c1]:
            event = EventType.SHRINKING
        else:
            event = _by_size(n1, n2)
        records.append(EvolutionRecord(t, event, (c1,), (c2,), {key: scores[key]}))

    for c1 in prev:
        if not fwd[c1.id]:
            records.append(EvolutionRecord(t, EventType.DISSOLVING, (c1.id,), ()))
    for c2 in nxt:
        if not bwd[c2.id]:
            records.append(EvolutionRecord(t, EventType.FORMING, (), (c2.id,)))
    return records


def track(partitions: Sequence[Partition], config: TrackerConfig = TrackerConfig()) -> list[EvolutionRecord]:
    records = []
    for p0, p1 in zip(partitions, partitions[1:]):
        records.extend(classify_transition(p0, p1, config))
    return records


@dataclass
class Lineages:
    """Chains of one community's identities across snapshots."""

    chains: dict[str, list[str]]
    predecessor: dict[str, str]
    lineage_of: dict[str, str]
    snapshot_of: dict[str, int]


def build_lineages(records: Sequence[EvolutionRecord], partitions: Sequence[Partition]) -> Lineages:
    """Link communities through continuing/growing/shrinking records.

    Links are assigned one-to-one per transition, strongest first (F + B), so a
    community never has two predecessors or two successors.
    """
    by_t: dict[int, list] = {}
    for r in records:
        if r.event in LINKING:
            key = (r.predecessors[0], r.successors[0])
            f, bw = r.inclusions[key]
            by_t.setdefault(r.from_snapshot, []).append((-(f + bw), key))

    predecessor: dict[str, str] = {}
    for t in sorted(by_t):
        used_prev: set[str] = set()
        for _, (c1, c2) in sorted(by_t[t]):
            if c1 in used_prev or c2 in predecessor:
                continue
            used_prev.add(c1)
            predecessor[c2] = c1

    chains: dict[str, list[str]] = {}
    lineage_of: dict[str, str] = {}
    snapshot_of: dict[str, int] = {}
    for p in partitions:
        for c in p.communities:
            snapshot_of[c.id] = p.snapshot_index
            root = lineage_of.get(predecessor.get(c.id, ""), c.id)
            lineage_of[c.id] = root
            chains.setdefault(root, []).append(c.id)
    return Lineages(chains, predecessor, lineage_of, snapshot_of)


# ---------------------------------------------------------------------------
# files


def record_to_json(r: EvolutionRecord) -> dict:
    return {
        "from_snapshot": r.from_snapshot,
        "event": r.event.value,
        "predecessors": list(r.predecessors),
        "successors": list(r.successors),
        "inclusions": {f"{p}->{s}": [fw, bw] for (p, s), (fw, bw) in r.inclusions.items()},
    }


def record_from_json(d: dict) -> EvolutionRecord:
    inc = {}
    for key, (fw, bw) in d["inclusions"].items():
        p, s = key.split("->")
        inc[(p, s)] = (float(fw), float(bw))
    return EvolutionRecord(d["from_snapshot"], EventType(d["event"]), tuple(d["predecessors"]),
                           tuple(d["successors"]), inc)


def write_records(records: Sequence[EvolutionRecord], path) -> None:
    Path(path).write_text(json.dumps([record_to_json(r) for r in records], indent=1) + "\n", encoding="utf-8")


def read_records(path) -> list[EvolutionRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing evolution events file: {path}")
    return [record_from_json(d) for d in json.loads(path.read_text(encoding="utf-8"))]


def event_distribution(records: Sequence[EvolutionRecord], n_transitions: int) -> list[tuple[int, str, int]]:
    counts = {(t, e): 0 for t in range(n_transitions) for e in EventType}
    for r in records:
        counts[(r.from_snapshot, r.event)] += 1
    return [(t, e.value, counts[(t, e)]) for t in range(n_transitions) for e in EventType]


def write_event_distribution(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "event", "count"])
        w.writerows(rows)


def write_lineages(lineages: Lineages, path) -> None:
    Path(path).write_text(json.dumps({"chains": lineages.chains}, indent=1) + "\n", encoding="utf-8")
