from __future__ import annotations

import itertools
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from svcevo.community import Community, Partition, make_community
from svcevo.temporal_graph import Entity, EntityKind, Snapshot

T0 = datetime(2020, 1, 1, tzinfo=timezone.utc)


def day(d: float) -> datetime:
    return T0 + timedelta(days=d)


def snap(edges, index: int = 0, when: datetime = T0) -> Snapshot:
    """Snapshot from ``{(u, v): w}`` (or an iterable of pairs, unit weight)."""
    if not isinstance(edges, dict):
        edges = {e: 1.0 for e in edges}
    canon = {}
    for (u, v), w in edges.items():
        canon[(u, v) if u < v else (v, u)] = float(w)
    canon = dict(sorted(canon.items()))
    nodes = tuple(sorted({n for pair in canon for n in pair}))
    return Snapshot(index, when, nodes, canon)


def clique(names):
    return list(itertools.combinations(names, 2))


def uniform(cid: str, members, index: int = 0) -> Community:
    members = frozenset(members)
    sp = {m: 1.0 / len(members) for m in members}
    return Community(cid, index, members, sp, members)


def partition(index: int, *communities: Community) -> Partition:
    return Partition(index, tuple(communities), 0.0)


def registry_for(nodes, services=None) -> dict[str, Entity]:
    services = set(nodes[::2] if services is None else services)
    return {n: Entity(n, EntityKind.SERVICE if n in services else EntityKind.STAKEHOLDER) for n in nodes}


def random_snapshot(rng: np.random.Generator, n: int, p: float, weighted: bool = True, prefix: str = "n") -> Snapshot:
    names = [f"{prefix}{i:02d}" for i in range(n)]
    edges = {}
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < p:
            edges[(names[i], names[j])] = float(rng.uniform(0.1, 3.0)) if weighted else 1.0
    return snap(edges)


@pytest.fixture
def two_cliques_bridge() -> Snapshot:
    return snap(clique("abcd") + clique("efgh") + [("d", "e")])


@pytest.fixture
def two_triangles() -> Snapshot:
    return snap(clique("abc") + clique("def"))


__all__ = ["T0", "day", "snap", "clique", "uniform", "partition", "registry_for", "random_snapshot",
           "make_community"]


# acceptance criteria report their verdicts here; printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
