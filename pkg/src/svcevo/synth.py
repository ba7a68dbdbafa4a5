"""Synthetic service ecosystems with a scripted community lifecycle.

A directive at snapshot ``s`` describes what happens to a community between
snapshots ``s`` and ``s + 1``. During each period every live community emits
interaction events on a random subgraph of its member pairs; sparse noise
events link random members of different communities. Relations use the aging
mechanism with a memory equal to one period, so each snapshot reflects the
current period's structure only.

When ``plant_signal`` is set, the per-edge event rate of a community during
period ``s`` depends on its upcoming directive, which gives the classifier a
learnable precursor in the activity features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .temporal_graph import (
    Entity,
    EntityKind,
    InteractionEvent,
    Mechanism,
    MechanismConfig,
    RelationRule,
    sort_events,
    write_entities,
    write_events,
    write_mechanisms,
)

ACTIONS = ("continue", "grow", "shrink", "split", "merge", "dissolve", "form")
EVENT_OF_ACTION = {
    "continue": "continuing",
    "grow": "growing",
    "shrink": "shrinking",
    "split": "splitting",
    "merge": "merging",
    "dissolve": "dissolving",
    "form": "forming",
}
# extra events per active pair, keyed by the upcoming directive
PLANTED_RATES = {
    "continue": 1.2,
    "grow": 2.4,
    "shrink": 0.6,
    "split": 3.6,
    "merge": 5.0,
    "dissolve": 0.1,
}
INTRA_RELATION = "cooperation"
NOISE_RELATION = "contact"


class ScriptError(ValueError):
    """The evolution script cannot be realised."""


@dataclass(frozen=True)
class Directive:
    snapshot: int
    community: str
    action: str
    amount: int = 0  # nodes added/removed (grow, shrink), parts (split), size (form)
    partners: tuple[str, ...] = ()  # merge partners
    results: tuple[str, ...] = ()  # ids of communities created by split/merge/form


@dataclass
class EvolutionScript:
    initial: dict[str, int]
    directives: list[Directive] = field(default_factory=list)
    n_snapshots: int = 10
    period_days: int = 30
    start: str = "2016-08-01T00:00:00Z"
    intra_p: float = 0.6
    intra_rate: float = 1.2
    noise_rate: float = 0.05
    service_mix: float = 0.5
    min_size: int = 4
    plant_signal: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_snapshots < 2:
            raise ScriptError("need at least two snapshots")
        if self.intra_rate <= 0 or self.noise_rate < 0 or not 0 < self.intra_p <= 1:
            raise ScriptError("rates must be positive and intra_p in (0, 1]")
        if not 0 < self.service_mix < 1:
            raise ScriptError("service_mix must lie in (0, 1)")
        for d in self.directives:
            if d.action not in ACTIONS:
                raise ScriptError(f"unknown directive {d.action!r}")
            if not 0 <= d.snapshot < self.n_snapshots - 1:
                raise ScriptError(f"directive at snapshot {d.snapshot} has no following snapshot")

    def to_json(self) -> dict:
        d = asdict(self)
        d["directives"] = [asdict(x) for x in self.directives]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvolutionScript":
        d = dict(d)
        d["directives"] = [
            Directive(**{**x, "partners": tuple(x.get("partners", ())), "results": tuple(x.get("results", ()))})
            for x in d.get("directives", [])
        ]
        return cls(**d)


@dataclass
class SynthOutput:
    registry: dict[str, Entity]
    events: list[InteractionEvent]
    config: MechanismConfig
    schedule: dict

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_entities(self.registry, out_dir / "nodes.csv")
        write_events(self.events, out_dir / "events.csv")
        write_mechanisms(self.config, out_dir / "mechanisms.cfg")
        (out_dir / "schedule.json").write_text(json.dumps(self.schedule, indent=1) + "\n", encoding="utf-8")


def _plan(script: EvolutionScript, rng: np.random.Generator):
    """Membership per snapshot plus the ground-truth transition list."""
    counter = 0

    def fresh(k):
        nonlocal counter
        out = [f"n{counter + i:04d}" for i in range(k)]
        counter += k
        return out

    used = set(script.initial)
    for d in script.directives:
        used.update(d.results)
    next_cid = 0

    def new_cid(d: Directive, k: int):
        nonlocal next_cid
        if k < len(d.results):
            return d.results[k]
        while f"c{next_cid:02d}" in used:
            next_cid += 1
        cid = f"c{next_cid:02d}"
        used.add(cid)
        return cid

    for cid, size in script.initial.items():
        if size < script.min_size:
            raise ScriptError(f"community {cid} starts below the size threshold")
    live = {cid: fresh(size) for cid, size in script.initial.items()}
    states = [dict(live)]
    transitions = []
    by_step: dict[int, list[Directive]] = {}
    for d in script.directives:
        by_step.setdefault(d.snapshot, []).append(d)

    for s in range(script.n_snapshots - 1):
        nxt: dict[str, list[str]] = {}
        assigned: dict[str, Directive] = {}
        for d in by_step.get(s, []):
            if d.action == "form":
                continue
            for cid in (d.community, *d.partners):
                if cid not in live:
                    raise ScriptError(f"snapshot {s}: {d.action} references dead community {cid!r}")
                if cid in assigned:
                    raise ScriptError(f"snapshot {s}: community {cid!r} has two directives")
                assigned[cid] = d
        for cid in live:
            assigned.setdefault(cid, Directive(s, cid, "continue"))

        done = set()
        for cid in live:
            d = assigned[cid]
            if cid in done:
                continue
            members = live[cid]
            if d.action == "continue":
                nxt[cid] = members
                transitions.append((s, cid, "continue", cid, [cid]))
            elif d.action == "grow":
                if d.amount < 1:
                    raise ScriptError(f"snapshot {s}: grow needs a positive amount")
                nxt[cid] = members + fresh(d.amount)
                transitions.append((s, cid, "grow", cid, [cid]))
            elif d.action == "shrink":
                if d.amount < 1 or len(members) - d.amount < script.min_size:
                    raise ScriptError(f"snapshot {s}: cannot shrink {cid!r} by {d.amount}")
                drop = set(rng.choice(len(members), d.amount, replace=False).tolist())
                nxt[cid] = [m for i, m in enumerate(members) if i not in drop]
                transitions.append((s, cid, "shrink", cid, [cid]))
            elif d.action == "split":
                parts = d.amount or 2
                if parts < 2 or len(members) // parts < script.min_size:
                    raise ScriptError(
                        f"snapshot {s}: cannot split {cid!r} ({len(members)} nodes) into {parts} parts "
                        f"of at least {script.min_size}")
                shuffled = [members[i] for i in rng.permutation(len(members))]
                kids = []
                for k in range(parts):
                    kid = new_cid(d, k)
                    nxt[kid] = shuffled[k::parts]
                    kids.append(kid)
                transitions.append((s, cid, "split", cid, kids))
            elif d.action == "merge":
                group = [d.community, *d.partners]
                if len(set(group)) < 2:
                    raise ScriptError(f"snapshot {s}: merge of {cid!r} needs partners")
                kid = new_cid(d, 0)
                nxt[kid] = [m for g in group for m in live[g]]
                for g in group:
                    transitions.append((s, g, "merge", g, [kid]))
                    done.add(g)
            elif d.action == "dissolve":
                transitions.append((s, cid, "dissolve", cid, []))
        for d in by_step.get(s, []):
            if d.action == "form":
                size = d.amount or 8
                if size < script.min_size:
                    raise ScriptError(f"snapshot {s}: formed community below the size threshold")
                kid = new_cid(d, 0)
                if kid in live or kid in nxt:
                    raise ScriptError(f"snapshot {s}: formed community id {kid!r} already in use")
                nxt[kid] = fresh(size)
                transitions.append((s, kid, "form", None, [kid]))
        live = nxt
        states.append(dict(live))
    return states, transitions, counter


def generate(script: EvolutionScript) -> SynthOutput:
    script.validate()
    rng = np.random.default_rng(script.seed)
    states, transitions, n_nodes = _plan(script, rng)

    kinds = rng.random(n_nodes) < script.service_mix
    registry = {
        f"n{i:04d}": Entity(f"n{i:04d}", EntityKind.SERVICE if kinds[i] else EntityKind.STAKEHOLDER)
        for i in range(n_nodes)
    }
    upcoming = {(s, cid): action for s, cid, action, _, _ in transitions if action != "form"}

    t0 = datetime.fromisoformat(script.start.replace("Z", "+00:00")).astimezone(timezone.utc)
    period = timedelta(days=script.period_days)
    period_s = script.period_days * 86400
    events = []
    for s, live in enumerate(states):
        stamp = t0 + s * period

        def when():
            return stamp - timedelta(seconds=int(rng.integers(1, period_s)))

        for cid in sorted(live):
            members = live[cid]
            action = upcoming.get((s, cid), "continue")
            rate = PLANTED_RATES[action] if script.plant_signal else script.intra_rate
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    if rng.random() >= script.intra_p:
                        continue
                    for _ in range(1 + int(rng.poisson(rate))):
                        events.append(InteractionEvent(members[i], members[j], INTRA_RELATION, when()))
        groups = [live[c] for c in sorted(live)]
        n_live = sum(len(g) for g in groups)
        if len(groups) >= 2:
            for _ in range(int(rng.poisson(script.noise_rate * n_live))):
                a, b = rng.choice(len(groups), 2, replace=False)
                u = groups[a][rng.integers(len(groups[a]))]
                v = groups[b][rng.integers(len(groups[b]))]
                events.append(InteractionEvent(u, v, NOISE_RELATION, when()))

    config = MechanismConfig(
        relations={
            INTRA_RELATION: RelationRule(Mechanism.AGING, 1.0),
            NOISE_RELATION: RelationRule(Mechanism.AGING, 0.5),
        },
        aging_period_days=script.period_days,
        aging_max_days=script.period_days,
    )
    schedule = {
        "start": script.start,
        "period_days": script.period_days,
        "n_snapshots": script.n_snapshots,
        "snapshots": [{cid: sorted(m) for cid, m in sorted(st.items())} for st in states],
        "transitions": [
            {"from_snapshot": s, "community": cid, "event": EVENT_OF_ACTION[action],
             "predecessor": pred, "successors": succ}
            for s, cid, action, pred, succ in transitions
        ],
        "script": script.to_json(),
    }
    return SynthOutput(registry, sort_events(events), config, schedule)


def default_script(seed: int = 0, n_communities: int = 12, n_snapshots: int = 10) -> EvolutionScript:
    """Benchmark script: a randomised but always-feasible lifecycle schedule."""
    rng = np.random.default_rng(seed + 1000)
    initial = {f"c{i:02d}": int(rng.integers(8, 13)) for i in range(n_communities)}
    sizes = dict(initial)
    directives = []
    next_id = n_communities

    def new_id():
        nonlocal next_id
        cid = f"c{next_id:02d}"
        next_id += 1
        return cid

    for s in range(n_snapshots - 1):
        order = sorted(sizes)
        order = [order[i] for i in rng.permutation(len(order))]
        taken = set()
        nxt = {}
        for cid in order:
            if cid in taken:
                continue
            taken.add(cid)
            n = sizes[cid]
            r = rng.random()
            if r < 0.45:
                nxt[cid] = n
                continue
            if r < 0.60 and n <= 16:
                k = int(rng.integers(3, 6))
                directives.append(Directive(s, cid, "grow", k))
                nxt[cid] = n + k
            elif r < 0.73 and n >= 10:
                k = int(rng.integers(3, n - 6))
                k = min(k, 5)
                directives.append(Directive(s, cid, "shrink", k))
                nxt[cid] = n - k
            elif r < 0.82 and n >= 12:
                kids = [new_id(), new_id()]
                directives.append(Directive(s, cid, "split", 2, results=tuple(kids)))
                nxt[kids[0]] = (n + 1) // 2
                nxt[kids[1]] = n // 2
            elif r < 0.91:
                partner = next((c for c in order if c not in taken and 0.75 <= sizes[c] / n <= 1.33
                                and sizes[c] + n <= 24), None)
                if partner is None:
                    nxt[cid] = n
                    continue
                taken.add(partner)
                kid = new_id()
                directives.append(Directive(s, cid, "merge", partners=(partner,), results=(kid,)))
                nxt[kid] = n + sizes[partner]
            elif len(sizes) > n_communities // 2:
                directives.append(Directive(s, cid, "dissolve"))
            else:
                nxt[cid] = n
        while len(nxt) < n_communities:
            cid = new_id()
            size = int(rng.integers(8, 11))
            directives.append(Directive(s, cid, "form", size, results=(cid,)))
            nxt[cid] = size
        sizes = nxt
    return EvolutionScript(initial=initial, directives=directives, n_snapshots=n_snapshots, seed=seed)


# ---------------------------------------------------------------------------
# recovery against ground truth


def _best_match(members: set, communities) -> tuple[str | None, float]:
    best, score = None, 0.0
    for c in communities:
        j = len(members & c.members) / len(members | c.members)
        if j > score:
            best, score = c.id, j
    return best, score


def recovery(schedule: dict, partitions: Sequence, records: Sequence, min_jaccard: float = 0.5) -> dict:
    """Fraction of scheduled transitions the tracker labels with the scheduled event."""
    part_by_t = {p.snapshot_index: p for p in partitions}
    events_as_pred: dict[str, set] = {}
    events_as_succ: dict[str, set] = {}
    for r in records:
        for c in r.predecessors:
            events_as_pred.setdefault(c, set()).add(r.event.value)
        for c in r.successors:
            events_as_succ.setdefault(c, set()).add(r.event.value)

    hits = 0
    misses = []
    for tr in schedule["transitions"]:
        s, cid, event = tr["from_snapshot"], tr["community"], tr["event"]
        if event == "forming":
            planted = set(schedule["snapshots"][s + 1][cid])
            found, j = _best_match(planted, part_by_t[s + 1].communities) if s + 1 in part_by_t else (None, 0)
            ok = found is not None and j >= min_jaccard and event in events_as_succ.get(found, set())
        else:
            planted = set(schedule["snapshots"][s][cid])
            found, j = _best_match(planted, part_by_t[s].communities) if s in part_by_t else (None, 0)
            ok = found is not None and j >= min_jaccard and event in events_as_pred.get(found, set())
        if ok:
            hits += 1
        else:
            misses.append({"from_snapshot": s, "community": cid, "event": event, "detected": found})
    total = len(schedule["transitions"])
    return {"scheduled": total, "recovered": hits, "rate": hits / total if total else 1.0, "misses": misses}
