"""Community detection per snapshot.

Louvain modularity optimisation, followed by a size filter. Each retained
community gets PageRank social positions on its induced subgraph and a set of
key nodes (members whose score no intra-community neighbour exceeds).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import kernels
from .temporal_graph import Snapshot

DEFAULT_MIN_SIZE = 4
DAMPING = 0.85
PAGERANK_TOL = 1e-10
PAGERANK_MAX_ITER = 200
# ties in social position within this absolute tolerance count as equal
KEY_NODE_TOL = 1e-12


@dataclass(frozen=True)
class Community:
    id: str
    snapshot_index: int
    members: frozenset
    social_position: Mapping[str, float] = field(compare=False)
    key_nodes: frozenset = frozenset()

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class Partition:
    snapshot_index: int
    communities: tuple[Community, ...]
    modularity: float
    assignment: Mapping[str, int] = field(compare=False, default_factory=dict)

    def by_id(self) -> dict[str, Community]:
        return {c.id: c for c in self.communities}


def _edge_arrays(snapshot: Snapshot):
    pos = {n: i for i, n in enumerate(snapshot.nodes)}
    m = len(snapshot.edges)
    eu = np.empty(m, dtype=np.int64)
    ev = np.empty(m, dtype=np.int64)
    ew = np.empty(m)
    for k, ((u, v), w) in enumerate(snapshot.edges.items()):
        eu[k], ev[k], ew[k] = pos[u], pos[v], w
    return eu, ev, ew


def _level_graph(n, eu, ev, ew):
    """CSR plus degrees for an edge list that may contain self-loops."""
    loop = eu == ev
    src = np.concatenate([eu, ev[~loop]])
    dst = np.concatenate([ev, eu[~loop]])
    wts = np.concatenate([ew, ew[~loop]])
    order = np.lexsort((dst, src))
    src, dst, wts = src[order], dst[order], wts[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    degree = np.bincount(eu, weights=ew, minlength=n) + np.bincount(ev, weights=ew, minlength=n)
    return indptr, dst, wts, degree


def _aggregate(comm, eu, ev, ew):
    cu, cv = comm[eu], comm[ev]
    lo, hi = np.minimum(cu, cv), np.maximum(cu, cv)
    keys, inv = np.unique(np.stack([lo, hi], axis=1), axis=0, return_inverse=True)
    w = np.zeros(len(keys))
    np.add.at(w, inv.ravel(), ew)
    return keys[:, 0].copy(), keys[:, 1].copy(), w


def _modularity_arrays(comm, eu, ev, ew, resolution):
    degree = np.bincount(eu, weights=ew, minlength=len(comm)) + np.bincount(ev, weights=ew, minlength=len(comm))
    m = ew.sum()
    labels, inv = np.unique(comm, return_inverse=True)
    internal = np.zeros(len(labels))
    same = inv[eu] == inv[ev]
    np.add.at(internal, inv[eu][same], ew[same])
    tot = np.bincount(inv, weights=degree, minlength=len(labels))
    return float(np.sum(internal / m - resolution * (tot / (2.0 * m)) ** 2))


def modularity(snapshot: Snapshot, assignment: Mapping[str, Hashable], resolution: float = 1.0) -> float:
    """Weighted Newman modularity of ``assignment`` (node -> label) on ``snapshot``."""
    missing = [n for n in snapshot.nodes if n not in assignment]
    if missing:
        raise ValueError(f"assignment misses nodes: {missing[:5]}")
    if not snapshot.edges:
        return 0.0
    labels = {}
    comm = np.array([labels.setdefault(assignment[n], len(labels)) for n in snapshot.nodes], dtype=np.int64)
    eu, ev, ew = _edge_arrays(snapshot)
    return _modularity_arrays(comm, eu, ev, ew, resolution)


def louvain_assignment(snapshot: Snapshot, seed: int = 0, resolution: float = 1.0) -> np.ndarray:
    """Full Louvain partition as an integer label per node (``snapshot.nodes`` order)."""
    n0 = len(snapshot.nodes)
    if n0 == 0:
        raise ValueError("cannot run Louvain on an empty snapshot")
    rng = np.random.default_rng(seed)
    eu0, ev0, ew0 = _edge_arrays(snapshot)
    two_m = 2.0 * float(ew0.sum())
    eps = 1e-12 * two_m

    membership = np.arange(n0)
    n, eu, ev, ew = n0, eu0, ev0, ew0
    while True:
        indptr, indices, wts, degree = _level_graph(n, eu, ev, ew)
        comm = np.arange(n)
        moves = kernels.local_move(indptr, indices, wts, degree, comm, rng.permutation(n), two_m, resolution, eps)
        if moves == 0:
            break
        _, comm = np.unique(comm, return_inverse=True)
        membership = comm[membership]
        eu, ev, ew = _aggregate(comm, eu, ev, ew)
        n = int(comm.max()) + 1
        if n == 1:
            break

    # node-level polish: the coarse levels can leave single-node improvements
    indptr, indices, wts, degree = _level_graph(n0, eu0, ev0, ew0)
    comm = membership.astype(np.int64).copy()
    kernels.local_move(indptr, indices, wts, degree, comm, rng.permutation(n0), two_m, resolution, eps)
    _, comm = np.unique(comm, return_inverse=True)
    return comm


def social_position(members, snapshot: Snapshot) -> dict[str, float]:
    """Weighted PageRank on the subgraph induced by ``members``."""
    nodes = sorted(members)
    n = len(nodes)
    if n == 0:
        return {}
    pos = {x: i for i, x in enumerate(nodes)}
    W = np.zeros((n, n))
    adj = snapshot.adjacency()
    for x in nodes:
        for y, w in adj.get(x, {}).items():
            if y in pos:
                W[pos[x], pos[y]] = w
    strength = W.sum(axis=1)
    dangling = strength == 0
    safe = np.where(dangling, 1.0, strength)
    p = np.full(n, 1.0 / n)
    for _ in range(PAGERANK_MAX_ITER):
        nxt = (1.0 - DAMPING) / n + DAMPING * ((p / safe * ~dangling) @ W + p[dangling].sum() / n)
        change = np.abs(nxt - p).sum()
        p = nxt
        if change < PAGERANK_TOL:
            break
    p = p / p.sum()
    return {x: float(p[i]) for i, x in enumerate(nodes)}


def key_nodes(members, sp: Mapping[str, float], snapshot: Snapshot) -> frozenset:
    """Members whose social position is not exceeded by any intra-community neighbour."""
    members = set(members)
    adj = snapshot.adjacency()
    keys = set()
    for x in members:
        nbrs = [y for y in adj.get(x, {}) if y in members]
        if all(sp[x] >= sp[y] - KEY_NODE_TOL for y in nbrs):
            keys.add(x)
    if not keys and members:
        keys.add(max(sorted(members), key=lambda y: sp[y]))
    return frozenset(keys)


def make_community(cid: str, snapshot: Snapshot, members) -> Community:
    sp = social_position(members, snapshot)
    return Community(cid, snapshot.index, frozenset(members), sp, key_nodes(members, sp, snapshot))


def louvain(snapshot: Snapshot, seed: int = 0, resolution: float = 1.0,
            min_size: int = DEFAULT_MIN_SIZE) -> Partition:
    comm = louvain_assignment(snapshot, seed=seed, resolution=resolution)
    groups: dict[int, list[str]] = {}
    for node, c in zip(snapshot.nodes, comm):
        groups.setdefault(int(c), []).append(node)
    ordered = sorted(groups.values(), key=lambda g: (-len(g), min(g)))
    kept = [g for g in ordered if len(g) >= min_size]
    communities = tuple(
        make_community(f"s{snapshot.index}_c{k}", snapshot, g) for k, g in enumerate(kept)
    )
    assignment = {node: int(c) for node, c in zip(snapshot.nodes, comm)}
    eu, ev, ew = _edge_arrays(snapshot)
    q = _modularity_arrays(comm, eu, ev, ew, resolution)
    return Partition(snapshot.index, communities, q, assignment)


def detect_all(snapshots: Sequence[Snapshot], seed: int = 0, resolution: float = 1.0,
               min_size: int = DEFAULT_MIN_SIZE) -> list[Partition]:
    out = []
    for s in snapshots:
        if len(s.nodes) == 0:
            out.append(Partition(s.index, (), 0.0, {}))
        else:
            out.append(louvain(s, seed=seed, resolution=resolution, min_size=min_size))
    return out


# ---------------------------------------------------------------------------
# communities JSON


def communities_filename(index: int) -> str:
    return f"communities_{index:03d}.json"


def partition_to_json(partition: Partition) -> list[dict]:
    return [
        {
            "community_id": c.id,
            "members": sorted(c.members),
            "key_nodes": sorted(c.key_nodes),
            "social_position": {k: c.social_position[k] for k in sorted(c.social_position)},
        }
        for c in partition.communities
    ]


def partition_from_json(index: int, rows: list[dict], modularity_value: float = float("nan")) -> Partition:
    comms = tuple(
        Community(
            r["community_id"], index, frozenset(r["members"]),
            {k: float(v) for k, v in r["social_position"].items()}, frozenset(r["key_nodes"]),
        )
        for r in rows
    )
    return Partition(index, comms, modularity_value, {})


def write_partitions(partitions: Sequence[Partition], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in partitions:
        name = communities_filename(p.snapshot_index)
        (out_dir / name).write_text(json.dumps(partition_to_json(p), indent=1) + "\n", encoding="utf-8")
        entries.append({"index": p.snapshot_index, "file": name, "modularity": p.modularity,
                        "n_communities": len(p.communities)})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"partitions": entries}, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_partitions(out_dir) -> list[Partition]:
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"missing communities manifest: {manifest}")
    entries = json.loads(manifest.read_text(encoding="utf-8"))["partitions"]
    return [
        partition_from_json(e["index"], json.loads((out_dir / e["file"]).read_text(encoding="utf-8")), e["modularity"])
        for e in entries
    ]
