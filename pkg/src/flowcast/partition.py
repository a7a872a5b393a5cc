"""Multilevel k-way partitioning with overlap (halo) augmentation.

The pipeline is the classic three-phase scheme: symmetrize the directed
weights, coarsen by heavy-edge matching, partition the coarsest graph by
greedy recursive bisection, then uncoarsen while refining with single-node
FM moves (best-prefix rollback, so a pass never increases the edge cut).

Halo selection adds, per partition, nearby out-of-partition nodes and
greedily thins them so no two kept halos are within the distance threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import SensorGraph
from .sparse import CsrMatrix

_MAX_FM_PASSES = 12


@dataclass(frozen=True)
class PartitionAssignment:
    part_of: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "part_of", np.asarray(self.part_of, dtype=np.int64))
        if self.part_of.size and (self.part_of.min() < 0 or self.part_of.max() >= self.k):
            raise ValueError("part ids out of range")

    def nodes_of(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.part_of == part)


@dataclass
class CoarseLevel:
    graph: SensorGraph
    match_map: np.ndarray  # finer-level node -> this level's node (identity at level 0)
    level: int
    node_weights: np.ndarray  # aggregated original-node counts


@dataclass
class SubgraphBundle:
    part_id: int
    graph: SensorGraph  # directed weights restricted to owned + halo nodes
    local_to_global: np.ndarray
    halo_flags: np.ndarray  # True where the local node is owned by another part

    @property
    def n_local(self) -> int:
        return int(self.local_to_global.size)

    @property
    def owned_global(self) -> np.ndarray:
        return self.local_to_global[~self.halo_flags]

    def global_to_local(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.local_to_global)}


# ----------------------------------------------------------------------
# phase 0: symmetrization
# ----------------------------------------------------------------------


def symmetrize(graph: SensorGraph) -> SensorGraph:
    """Undirected view: combined weight w(i,j)+w(j,i) per direction pair.

    A graph whose adjacency is already exactly symmetric is returned as-is.
    """
    adj = graph.adjacency
    t = adj.transpose()
    if (np.array_equal(adj.indptr, t.indptr) and np.array_equal(adj.indices, t.indices)
            and np.array_equal(adj.data, t.data)):
        return graph
    r, c, v = adj.triples()
    combined = CsrMatrix.from_triples(
        adj.rows, adj.cols,
        np.concatenate([r, c]), np.concatenate([c, r]), np.concatenate([v, v]),
    )
    return SensorGraph(graph.sensor_ids, combined)


def _adjacency_lists(graph: SensorGraph):
    adj = graph.adjacency
    return [
        (adj.indices[adj.indptr[i]:adj.indptr[i + 1]],
         adj.data[adj.indptr[i]:adj.indptr[i + 1]])
        for i in range(graph.n_nodes)
    ]


# ----------------------------------------------------------------------
# phase 1: coarsening by heavy-edge matching
# ----------------------------------------------------------------------


def heavy_edge_matching(graph: SensorGraph, order) -> np.ndarray:
    """Match each visited unmatched node to its heaviest unmatched neighbor.

    Returns fine -> coarse index map; coarse ids are numbered by the smallest
    fine member so the labeling does not depend on the visit order.
    """
    n = graph.n_nodes
    adj = _adjacency_lists(graph)
    mate = -np.ones(n, dtype=np.int64)
    for v in order:
        if mate[v] >= 0:
            continue
        nbrs, ws = adj[v]
        best, best_w = -1, 0.0
        for u, w in zip(nbrs, ws):
            if u == v or mate[u] >= 0:
                continue
            if w > best_w or (w == best_w and (best == -1 or u < best)):
                best, best_w = int(u), float(w)
        mate[v] = best if best >= 0 else v
        if best >= 0:
            mate[best] = v
    group_key = np.minimum(mate, np.arange(n))
    coarse_ids = {key: i for i, key in enumerate(sorted(set(int(g) for g in group_key)))}
    return np.array([coarse_ids[int(g)] for g in group_key], dtype=np.int64)


def _coarse_graph(graph: SensorGraph, match_map: np.ndarray, node_weights: np.ndarray):
    n_coarse = int(match_map.max()) + 1 if match_map.size else 0
    r, c, v = graph.adjacency.triples()
    cr, cc = match_map[r], match_map[c]
    keep = cr != cc  # edges inside a merged pair disappear
    adj = CsrMatrix.from_triples(n_coarse, n_coarse, cr[keep], cc[keep], v[keep])
    weights = np.zeros(n_coarse)
    np.add.at(weights, match_map, node_weights)
    ids = [f"c{i}" for i in range(n_coarse)]
    return SensorGraph(ids, adj), weights


def coarsen(graph: SensorGraph, min_size: int, seed: int = 0) -> list[CoarseLevel]:
    """Successive heavy-edge coarsenings; level 0 is the (symmetric) input.

    Stops once the node count is at or below min_size, or a matching shrinks
    the graph by less than 10%.
    """
    base = symmetrize(graph)
    levels = [CoarseLevel(base, np.arange(base.n_nodes, dtype=np.int64), 0,
                          np.ones(base.n_nodes))]
    rng = np.random.default_rng(seed)
    while levels[-1].graph.n_nodes > min_size:
        cur = levels[-1]
        order = rng.permutation(cur.graph.n_nodes)
        match_map = heavy_edge_matching(cur.graph, order)
        n_coarse = int(match_map.max()) + 1
        if n_coarse > 0.9 * cur.graph.n_nodes:
            break
        cgraph, cweights = _coarse_graph(cur.graph, match_map, cur.node_weights)
        levels.append(CoarseLevel(cgraph, match_map, cur.level + 1, cweights))
    return levels


# ----------------------------------------------------------------------
# phase 2: initial partitioning by greedy recursive bisection
# ----------------------------------------------------------------------


def initial_partition(graph: SensorGraph, k: int, seed: int = 0,
                      node_weights: np.ndarray | None = None,
                      imbalance: float = 0.05) -> PartitionAssignment:
    if k < 1:
        raise ValueError("k must be at least 1")
    n = graph.n_nodes
    if k > n:
        raise DataError("k exceeds nodes")
    if node_weights is None:
        node_weights = np.ones(n)
    adj = _adjacency_lists(graph)
    rng = np.random.default_rng(seed)
    part = np.zeros(n, dtype=np.int64)

    def grow(nodes: np.ndarray, k1: int, k2: int) -> np.ndarray:
        """Best of a few seeded greedy growings toward the proportional target."""
        member = np.zeros(n, dtype=bool)
        member[nodes] = True
        total = float(node_weights[nodes].sum())
        target = total * k1 / (k1 + k2)
        best_region, best_score = None, None
        attempts = min(4, nodes.size)
        starts = rng.choice(nodes, size=attempts, replace=False)
        for start in starts:
            region = np.zeros(n, dtype=bool)
            region[start] = True
            weight = float(node_weights[start])
            count = 1
            conn = np.zeros(n)
            for u, w in zip(*adj[start]):
                if member[u]:
                    conn[u] += w
            while count < nodes.size - k2:
                cand = np.flatnonzero(member & ~region & (conn > 0))
                if cand.size:
                    pick = int(cand[np.argmax(conn[cand])])
                else:
                    pick = int(nodes[~region[nodes]].min())  # disconnected jump
                if count >= k1:
                    if abs(weight + node_weights[pick] - target) > abs(weight - target):
                        break
                region[pick] = True
                weight += float(node_weights[pick])
                count += 1
                for u, w in zip(*adj[pick]):
                    if member[u]:
                        conn[u] += w
            cut = 0.0
            for v in np.flatnonzero(region):
                for u, w in zip(*adj[v]):
                    if member[u] and not region[u]:
                        cut += w
            score = (cut, abs(weight - target))
            if best_score is None or score < best_score:
                best_region, best_score = region.copy(), score
        return np.flatnonzero(best_region)

    def bisect(nodes: np.ndarray, kk: int, base: int) -> None:
        if kk == 1:
            part[nodes] = base
            return
        k1, k2 = kk // 2, kk - kk // 2
        left = grow(nodes, k1, k2)
        left_mask = np.zeros(n, dtype=bool)
        left_mask[left] = True
        right = nodes[~left_mask[nodes]]
        bisect(left, k1, base)
        bisect(right, k2, base + k1)

    bisect(np.arange(n, dtype=np.int64), k, 0)
    return PartitionAssignment(part, k)


# ----------------------------------------------------------------------
# phase 3: uncoarsening with FM refinement
# ----------------------------------------------------------------------


def _cut_value(adj, part) -> float:
    cut = 0.0
    for v in range(len(part)):
        nbrs, ws = adj[v]
        for u, w in zip(nbrs, ws):
            if u > v and part[u] != part[v]:
                cut += w
    return cut


def _rebalance(adj, node_w, part, k, maxw) -> np.ndarray:
    """Move nodes out of overweight parts until every part fits under maxw.

    Parts that cannot be repaired at this level (a single oversized coarse
    node, or no admissible destination) are left for the finer levels.
    """
    part = part.copy()
    part_w = np.bincount(part, weights=node_w, minlength=k)
    stuck: set[int] = set()
    for _ in range(len(part)):
        over = [int(p) for p in np.flatnonzero(part_w > maxw) if int(p) not in stuck]
        if not over:
            break
        p = max(over, key=lambda q: part_w[q])
        members = np.flatnonzero(part == p)
        if members.size <= 1:
            stuck.add(p)
            continue
        best = None  # (-gain, v, q)
        for v in members:
            nbrs, ws = adj[v]
            gain_to = np.zeros(k)
            internal = 0.0
            for u, w in zip(nbrs, ws):
                if part[u] == p:
                    internal += w
                else:
                    gain_to[part[u]] += w
            for q in range(k):
                if q == p or part_w[q] + node_w[v] > maxw:
                    continue
                key = (-(gain_to[q] - internal), int(v), q)
                if best is None or key < best:
                    best = key
        if best is None:
            stuck.add(p)
            continue
        _, v, q = best
        part_w[p] -= node_w[v]
        part_w[q] += node_w[v]
        part[v] = q
    return part


def _fm_pass(adj, node_w, part_in, k, maxw):
    """One FM pass: greedy best-gain single-node moves, each node at most once,
    then rollback to the best prefix whose part weights satisfy the bound.

    Returns (assignment, gain_applied); gain_applied >= 0 by construction.
    """
    n = len(part_in)
    part = part_in.copy()
    part_w = np.bincount(part, weights=node_w, minlength=k)
    counts = np.bincount(part, minlength=k)
    slack = maxw + (node_w.max() if n else 0.0)
    locked = np.zeros(n, dtype=bool)
    moves: list[tuple[int, int, int]] = []
    cum = 0.0
    best_cum, best_len = 0.0, 0
    feasible_in = bool((part_w <= maxw).all())
    while True:
        best = None  # (-gain, v, q)
        for v in range(n):
            if locked[v]:
                continue
            p = part[v]
            if counts[p] <= 1:
                continue
            nbrs, ws = adj[v]
            if nbrs.size == 0:
                continue
            internal = 0.0
            external = np.zeros(k)
            for u, w in zip(nbrs, ws):
                if part[u] == p:
                    internal += w
                else:
                    external[part[u]] += w
            for q in np.flatnonzero(external):
                if part_w[q] + node_w[v] > slack:
                    continue
                key = (-(external[q] - internal), v, int(q))
                if best is None or key < best:
                    best = key
        if best is None:
            break
        neg_gain, v, q = best
        p = part[v]
        part[v] = q
        part_w[p] -= node_w[v]
        part_w[q] += node_w[v]
        counts[p] -= 1
        counts[q] += 1
        locked[v] = True
        cum += -neg_gain
        moves.append((v, p, q))
        prefix_ok = bool((part_w <= maxw).all()) or not feasible_in
        if prefix_ok and cum > best_cum:
            best_cum, best_len = cum, len(moves)
    out = part_in.copy()
    for v, _, q in moves[:best_len]:
        out[v] = q
    return out, best_cum


def refine_uncoarsen(levels: list[CoarseLevel], assignment: PartitionAssignment,
                     imbalance: float = 0.05,
                     pass_log: list | None = None) -> PartitionAssignment:
    """Project the coarsest assignment down to level 0, FM-refining at each level.

    pass_log, when given, collects (level, cut_before, cut_after) per FM pass.
    """
    k = assignment.k
    total = float(levels[0].node_weights.sum())
    maxw = math.ceil(total / k) * (1.0 + imbalance)
    part = assignment.part_of.copy()
    for idx in range(len(levels) - 1, -1, -1):
        lvl = levels[idx]
        adj = _adjacency_lists(lvl.graph)
        part = _rebalance(adj, lvl.node_weights, part, k, maxw)
        for _ in range(_MAX_FM_PASSES):
            before = _cut_value(adj, part)
            part, gain = _fm_pass(adj, lvl.node_weights, part, k, maxw)
            if pass_log is not None:
                pass_log.append((lvl.level, before, _cut_value(adj, part)))
            if gain <= 0.0:
                break
        if idx > 0:
            part = part[lvl.match_map]
    return PartitionAssignment(part, k)


def partition_graph(graph: SensorGraph, k: int, imbalance: float = 0.05,
                    seed: int = 0, pass_log: list | None = None) -> PartitionAssignment:
    """symmetrize -> coarsen -> initial partition -> refine; pure in (graph, k, imbalance, seed)."""
    n = graph.n_nodes
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise DataError("k exceeds nodes")
    if k == 1:
        return PartitionAssignment(np.zeros(n, dtype=np.int64), 1)
    levels = coarsen(graph, min_size=max(16, 4 * k), seed=seed)
    # initial partition wants the coarsest level that still has at least k nodes
    coarsest = max(i for i, lvl in enumerate(levels) if lvl.graph.n_nodes >= k)
    levels = levels[:coarsest + 1]
    init = initial_partition(levels[-1].graph, k, seed=seed,
                             node_weights=levels[-1].node_weights, imbalance=imbalance)
    return refine_uncoarsen(levels, init, imbalance=imbalance, pass_log=pass_log)


def edge_cut(graph: SensorGraph, assignment: PartitionAssignment) -> float:
    """Total symmetrized weight of edges crossing parts, each undirected edge once."""
    if assignment.part_of.size != graph.n_nodes:
        raise ValueError("assignment length does not match graph")
    sym = symmetrize(graph)
    r, c, v = sym.adjacency.triples()
    upper = r < c
    crossing = assignment.part_of[r[upper]] != assignment.part_of[c[upper]]
    return float(v[upper][crossing].sum())


# ----------------------------------------------------------------------
# overlap (halo) nodes
# ----------------------------------------------------------------------


def add_overlap_nodes(graph: SensorGraph, assignment: PartitionAssignment, part: int,
                      horizon_k: int, d_prime: float, provider) -> list[int]:
    """Pick out-of-partition context nodes, greedily thinned by pair distance.

    Candidates are the union over owned nodes v of v's horizon_k nearest other
    nodes (provider distance from v), minus the partition itself. They are
    scanned by ascending distance to the partition (ties on index) and kept
    only when farther than d_prime from every halo kept so far, using the
    smaller of the two query directions as the pair distance.
    """
    if d_prime <= 0:
        raise ValueError("d_prime must be positive")
    if horizon_k < 1:
        raise ValueError("horizon_k must be at least 1")
    owned = assignment.nodes_of(part)
    in_part = np.zeros(graph.n_nodes, dtype=bool)
    in_part[owned] = True
    candidates: set[int] = set()
    dist_to_part: dict[int, float] = {}
    for v in owned:
        ranked = sorted((provider.dist(int(v), u), u) for u in range(graph.n_nodes) if u != v)
        for d, u in ranked[:horizon_k]:
            if in_part[u]:
                continue
            candidates.add(u)
            if u not in dist_to_part or d < dist_to_part[u]:
                dist_to_part[u] = d
    ordered = sorted(candidates, key=lambda u: (dist_to_part[u], u))
    kept: list[int] = []
    for c in ordered:
        near = False
        for h in kept:
            pair = min(provider.dist(c, h), provider.dist(h, c))
            if pair <= d_prime:
                near = True
                break
        if not near:
            kept.append(c)
    return kept


def extract_subgraphs(graph: SensorGraph, assignment: PartitionAssignment,
                      halos: list[list[int]] | None = None) -> list[SubgraphBundle]:
    """One bundle per part: owned nodes first (ascending), then halos in kept order."""
    if halos is None:
        halos = [[] for _ in range(assignment.k)]
    if len(halos) != assignment.k:
        raise ValueError("need one halo list per part")
    bundles = []
    for p in range(assignment.k):
        owned = assignment.nodes_of(p)
        owned_set = set(int(v) for v in owned)
        halo = [int(h) for h in halos[p]]
        for h in halo:
            if h in owned_set:
                raise ValueError(f"halo node {h} is owned by part {p}")
        local = np.concatenate([owned, np.asarray(halo, dtype=np.int64)]) if halo else owned.copy()
        sub_adj = graph.adjacency.restrict(local)
        sub_ids = [graph.sensor_ids[int(g)] for g in local]
        sub = SensorGraph(sub_ids, sub_adj, graph.kernel_sigma, graph.kernel_thresh,
                          graph.threshold_on)
        flags = np.zeros(local.size, dtype=bool)
        flags[owned.size:] = True
        bundles.append(SubgraphBundle(p, sub, local, flags))
    return bundles


# ----------------------------------------------------------------------
# on-disk layout
# ----------------------------------------------------------------------


def write_assignment_csv(path, graph: SensorGraph, assignment: PartitionAssignment) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "part"])
        for i, sid in enumerate(graph.sensor_ids):
            writer.writerow([sid, int(assignment.part_of[i])])


def read_assignment_csv(path, graph: SensorGraph) -> PartitionAssignment:
    part = -np.ones(graph.n_nodes, dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sensor_id", "part"]:
            raise DataError(f"{path}: expected header sensor_id,part")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[0] not in graph.id_to_index:
                raise DataError(f"{path}: row {lineno}: bad assignment row")
            part[graph.id_to_index[row[0]]] = int(row[1])
    if (part < 0).any():
        raise DataError(f"{path}: some sensors have no part assigned")
    return PartitionAssignment(part, int(part.max()) + 1)


def write_bundles(out_dir, bundles: list[SubgraphBundle]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in bundles:
        d = out / f"part{b.part_id:03d}"
        d.mkdir(exist_ok=True)
        b.graph.save(d / "graph.json")
        with open(d / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["local_index", "sensor_id", "global_index", "is_halo"])
            for i in range(b.n_local):
                writer.writerow([i, b.graph.sensor_ids[i], int(b.local_to_global[i]),
                                 int(b.halo_flags[i])])
        with open(d / "halos.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sensor_id", "global_index"])
            for i in np.flatnonzero(b.halo_flags):
                writer.writerow([b.graph.sensor_ids[int(i)], int(b.local_to_global[i])])


def read_bundles(bundle_dir) -> list[SubgraphBundle]:
    root = Path(bundle_dir)
    bundles = []
    for d in sorted(root.glob("part*")):
        graph = SensorGraph.load(d / "graph.json")
        l2g, flags = [], []
        with open(d / "nodes.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                l2g.append(int(row[2]))
                flags.append(bool(int(row[3])))
        bundles.append(SubgraphBundle(int(d.name[4:]), graph,
                                      np.asarray(l2g, dtype=np.int64),
                                      np.asarray(flags, dtype=bool)))
    if not bundles:
        raise DataError(f"{bundle_dir}: no part directories found")
    return bundles
