"""The option space: informative viewpoint admission (spatial thinning plus
gain gating) and the obstacle-avoiding Euclidean Steiner tree optimizer that
compacts the roadmap subtree into the navigation decision tree.

The optimizer is an anytime local-improvement loop over a feasible warm
start: propose junction relocations at the geometric median of each
branching node and its children (snapped onto nearby roadmap nodes), rebuild
the minimum spanning tree over collision-free line-of-sight edges, prune
non-terminal leaves, and accept only strict cost improvements. Every
accepted tree is valid, so callers may consume the best-so-far result at any
time; a synchronous run to convergence is the deterministic default.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .belief import _BeliefReads
from .config import SensorConfig, SteinerConfig, ViewpointConfig
from .geometry import Pose, kruskal_mst, weiszfeld_median
from .roadmap import RoadmapSnapshot

ROOT, TERMINAL, STEINER = "root", "terminal", "steiner"


@dataclass
class Viewpoint:
    vp_id: int
    pose: Pose
    gain: int
    roadmap_node: int
    informative: bool

    @property
    def xy(self) -> np.ndarray:
        return self.pose.position[:2]


class ViewpointManager:
    """Two-pass online filter over roadmap nodes: Poisson-disc spacing first
    (cheap), then the ray-casting gain gate; plus periodic re-evaluation."""

    SPACING = "spacing"
    LOW_GAIN = "low-gain"

    def __init__(self, sensor: SensorConfig, camera_height: float,
                 cfg: ViewpointConfig | None = None):
        self.cfg = cfg or ViewpointConfig()
        self.sensor = sensor
        self.camera_height = camera_height
        self.viewpoints: dict[int, Viewpoint] = {}
        self._next_id = 0
        # superset radius: any voxel in any heading's frustum lies within it
        self._reach = sensor.far * math.sqrt(
            1.0 + math.tan(sensor.hfov / 2) ** 2 + math.tan(sensor.vfov / 2) ** 2)

    def live(self) -> list[Viewpoint]:
        return [v for v in self.viewpoints.values() if v.informative]

    def admit(self, node_id: int, node_xy, base_z: float, belief: _BeliefReads):
        """Returns (Viewpoint, None) on admission or (None, reason).

        Spacing rejects before any ray is cast; gain must strictly exceed
        the threshold, evaluated as the best of the discrete headings.
        """
        xy = np.asarray(node_xy, dtype=float)
        for vp in self.viewpoints.values():
            if float(np.linalg.norm(vp.xy - xy)) < self.cfg.spacing:
                return None, self.SPACING
        cam = np.array([xy[0], xy[1], base_z + self.camera_height])
        gains = belief.panoramic_gains(cam, self.sensor, headings=self.cfg.headings)
        best_h = int(np.argmax(gains))
        gain = int(gains[best_h])
        if gain <= self.cfg.gain_threshold:
            return None, self.LOW_GAIN
        vp = Viewpoint(
            vp_id=self._next_id,
            pose=Pose(cam, yaw=2 * math.pi * best_h / self.cfg.headings),
            gain=gain,
            roadmap_node=node_id,
            informative=True)
        self.viewpoints[vp.vp_id] = vp
        self._next_id += 1
        return vp, None

    def reevaluate(self, belief: _BeliefReads, changed_region=None) -> list[int]:
        """Recompute gains with a panoramic sweep; viewpoints at or below the
        threshold retire (leave the terminal set). With a changed_region box,
        only viewpoints whose sensing reach touches it are re-examined (gain
        cannot have changed otherwise)."""
        retired = []
        for vp_id in sorted(self.viewpoints):
            vp = self.viewpoints[vp_id]
            if not vp.informative:
                continue
            if changed_region is not None:
                lo = np.asarray(changed_region.min) - self._reach
                hi = np.asarray(changed_region.max) + self._reach
                if np.any(vp.pose.position < lo) or np.any(vp.pose.position > hi):
                    continue
            gains = belief.panoramic_gains(vp.pose.position, self.sensor,
                                           headings=self.cfg.headings)
            best_h = int(np.argmax(gains))
            vp.gain = int(gains[best_h])
            if vp.gain <= self.cfg.gain_threshold:
                vp.informative = False
                retired.append(vp_id)
            else:
                vp.pose = Pose(vp.pose.position,
                               yaw=2 * math.pi * best_h / self.cfg.headings)
        return retired

    def retire(self, vp_ids) -> None:
        for vp_id in vp_ids:
            if vp_id in self.viewpoints:
                self.viewpoints[vp_id].informative = False


# ---------------------------------------------------------------------------
# the decision tree
# ---------------------------------------------------------------------------


@dataclass
class DecisionTree:
    """Rooted geometric tree: positions, per-node tags, parent links.

    Node 0 is always the root after construction helpers; terminals carry
    the vp_id of their viewpoint.
    """

    positions: np.ndarray            # (N, 2)
    parents: list[int | None]
    tags: list[str]
    vp_ids: list[int | None]
    total_cost: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.total_cost == 0.0:
            self.total_cost = self.recompute_cost()

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def root_index(self) -> int:
        return next(i for i, t in enumerate(self.tags) if t == ROOT)

    def recompute_cost(self) -> float:
        c = 0.0
        for i, p in enumerate(self.parents):
            if p is not None:
                c += float(np.linalg.norm(self.positions[i] - self.positions[p]))
        return c

    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in range(self.n)]
        for i, p in enumerate(self.parents):
            if p is not None:
                ch[p].append(i)
        return ch

    def edges(self) -> list[tuple[int, int, float]]:
        out = []
        for i, p in enumerate(self.parents):
            if p is not None:
                out.append((p, i, float(np.linalg.norm(self.positions[i] - self.positions[p]))))
        return out

    def terminal_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == TERMINAL]

    def depth_from_root(self) -> np.ndarray:
        """Arc length from the root to every node along tree edges."""
        order = [self.root_index]
        depth = np.zeros(self.n)
        ch = self.children()
        stack = [self.root_index]
        while stack:
            i = stack.pop()
            for c in ch[i]:
                depth[c] = depth[i] + float(np.linalg.norm(self.positions[c] - self.positions[i]))
                stack.append(c)
        return depth

    def path_to(self, index: int) -> list[int]:
        path = [index]
        while self.parents[path[-1]] is not None:
            path.append(self.parents[path[-1]])
        return path[::-1]

    def index_of_vp(self, vp_id: int) -> int | None:
        for i, v in enumerate(self.vp_ids):
            if v == vp_id:
                return i
        return None

    def export_text(self) -> str:
        return json.dumps({
            "total_cost": round(self.total_cost, 9),
            "nodes": [
                {"x": round(float(self.positions[i][0]), 9),
                 "y": round(float(self.positions[i][1]), 9),
                 "tag": self.tags[i], "vp": self.vp_ids[i],
                 "parent": self.parents[i]}
                for i in range(self.n)
            ],
        }, sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class TreeSnapshot:
    """Published, immutable decision tree plus provenance."""

    tree: DecisionTree
    epoch: int
    warm_cost: float
    iterations: int
    degraded: bool = False

    def root_subtrees(self) -> list[tuple[int, list[int]]]:
        return root_subtrees(self.tree)


def root_subtrees(tree: DecisionTree) -> list[tuple[int, list[int]]]:
    """Partition of non-root nodes by root-child ancestor, one entry per
    root-level subtree, ordered by child index."""
    ch = tree.children()
    out = []
    for child in sorted(ch[tree.root_index]):
        members = []
        stack = [child]
        while stack:
            i = stack.pop()
            members.append(i)
            stack.extend(ch[i])
        out.append((child, sorted(members)))
    return out


class UnreachableTerminal(ValueError):
    pass


def extract_subtree(snapshot: RoadmapSnapshot,
                    terminals: list[tuple[int, int]]) -> DecisionTree:
    """Warm start: the union of roadmap root-to-terminal parent chains.

    terminals is a list of (vp_id, roadmap_node_id). Degree-2 intermediate
    nodes are kept untouched; later median steps may shorten through them.
    Raises UnreachableTerminal naming any terminal not present in the
    snapshot.
    """
    keep: set[int] = {snapshot.root_id}
    for vp_id, node_id in terminals:
        if node_id not in snapshot.positions:
            raise UnreachableTerminal(f"viewpoint {vp_id} at roadmap node {node_id}")
        keep.update(snapshot.path_to(node_id))

    order = sorted(keep)
    index = {nid: i for i, nid in enumerate(order)}
    vp_by_node = {node_id: vp_id for vp_id, node_id in terminals}
    positions = np.array([snapshot.positions[nid] for nid in order], dtype=float)
    parents: list[int | None] = []
    tags: list[str] = []
    vp_ids: list[int | None] = []
    for nid in order:
        if nid == snapshot.root_id:
            parents.append(None)
            tags.append(ROOT)
            vp_ids.append(None)
            continue
        parents.append(index[snapshot.parents[nid]])
        if nid in vp_by_node:
            tags.append(TERMINAL)
            vp_ids.append(vp_by_node[nid])
        else:
            tags.append(STEINER)
            vp_ids.append(None)
    return DecisionTree(positions=positions, parents=parents, tags=tags, vp_ids=vp_ids)


# ---------------------------------------------------------------------------
# the optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizeInfo:
    warm_cost: float
    iterations: int = 0
    accepted_costs: list[float] = field(default_factory=list)
    degraded: bool = False


MERGE_EPS = 1e-3  # candidates closer than this to an existing node are noise


@dataclass
class _Cloud:
    """Working node set during one optimizer iteration."""

    positions: list[np.ndarray]
    tags: list[str]
    vp_ids: list[int | None]

    def key(self, p) -> tuple[int, int]:
        return (int(round(p[0] * 1e9)), int(round(p[1] * 1e9)))

    def near_existing(self, p, eps: float = MERGE_EPS) -> bool:
        arr = np.array(self.positions)
        return bool((np.linalg.norm(arr - np.asarray(p), axis=1) < eps).any())


def _tree_from_mst(cloud: _Cloud, chosen_edges, root_idx: int,
                   n_nodes: int) -> DecisionTree | None:
    """Root the MST edge set and prune non-terminal leaves repeatedly.

    Returns None when the root's component misses a terminal (caller falls
    back). Terminals are never pruned, even at degree 1.
    """
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    for i, j, _ in chosen_edges:
        adj[i].append(j)
        adj[j].append(i)

    parents = [None] * n_nodes
    seen = [False] * n_nodes
    seen[root_idx] = True
    stack = [root_idx]
    order = [root_idx]
    while stack:
        cur = stack.pop()
        for nxt in sorted(adj[cur]):
            if not seen[nxt]:
                seen[nxt] = True
                parents[nxt] = cur
                stack.append(nxt)
                order.append(nxt)

    required = {i for i, t in enumerate(cloud.tags) if t == TERMINAL}
    if any(not seen[i] for i in required):
        return None

    # iterative pruning of non-terminal, non-root leaves
    alive = [seen[i] for i in range(n_nodes)]
    child_count = [0] * n_nodes
    for i in range(n_nodes):
        if alive[i] and parents[i] is not None:
            child_count[parents[i]] += 1
    frontier = [i for i in range(n_nodes)
                if alive[i] and child_count[i] == 0
                and cloud.tags[i] not in (TERMINAL, ROOT)]
    while frontier:
        i = frontier.pop()
        alive[i] = False
        p = parents[i]
        if p is None:
            continue
        child_count[p] -= 1
        if child_count[p] == 0 and cloud.tags[p] not in (TERMINAL, ROOT):
            frontier.append(p)

    keep = [i for i in range(n_nodes) if alive[i]]
    remap = {old: new for new, old in enumerate(keep)}
    return DecisionTree(
        positions=np.array([cloud.positions[i] for i in keep]),
        parents=[None if parents[i] is None else remap[parents[i]] for i in keep],
        tags=[cloud.tags[i] for i in keep],
        vp_ids=[cloud.vp_ids[i] for i in keep])


def _smooth(tree: DecisionTree, edge_free) -> DecisionTree:
    """Bypass non-terminal degree-2 nodes whenever line of sight allows:
    reconnect the child straight to the grandparent and drop the relay.
    Stale pass-through nodes otherwise force the spanning tree into detours
    forever (spanning is mandatory and leaf pruning cannot reach them)."""
    positions = [tree.positions[i].copy() for i in range(tree.n)]
    parents = list(tree.parents)
    tags = list(tree.tags)
    vp_ids = list(tree.vp_ids)
    alive = [True] * len(parents)

    changed = True
    while changed:
        changed = False
        child_count = [0] * len(parents)
        only_child = [-1] * len(parents)
        for i, p in enumerate(parents):
            if alive[i] and p is not None:
                child_count[p] += 1
                only_child[p] = i
        for v in range(len(parents)):
            if not alive[v] or tags[v] != STEINER:
                continue
            p = parents[v]
            if p is None or child_count[v] != 1:
                continue
            c = only_child[v]
            if edge_free(positions[p], positions[c]):
                parents[c] = p
                alive[v] = False
                changed = True
                break

    keep = [i for i in range(len(parents)) if alive[i]]
    remap = {old: new for new, old in enumerate(keep)}
    return DecisionTree(
        positions=np.array([positions[i] for i in keep]),
        parents=[None if parents[i] is None else remap[parents[i]] for i in keep],
        tags=[tags[i] for i in keep],
        vp_ids=[vp_ids[i] for i in keep])


def _candidate_edges(cloud: _Cloud, warm_edges: set[tuple[int, int]],
                     edge_free, cfg: SteinerConfig, info: OptimizeInfo):
    """Collision-free line-of-sight pairs over the cloud, capped to k nearest
    neighbors per node above the size cap. Warm edges are always included so
    connectivity can never regress below the warm start; a warm edge that no
    longer passes the query marks the result degraded if used."""
    n = len(cloud.positions)
    pos = np.array(cloud.positions)
    pairs: set[tuple[int, int]] = set(warm_edges)
    if n <= cfg.edge_cap_nodes:
        for i in range(n):
            for j in range(i + 1, n):
                pairs.add((i, j))
    else:
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        k = min(cfg.edge_cap_knn, n - 1)
        for i in range(n):
            for j in np.argpartition(d[i], k)[:k]:
                pairs.add((min(i, int(j)), max(i, int(j))))

    edges = []
    stale: set[tuple[int, int]] = set()
    for i, j in sorted(pairs):
        w = float(np.linalg.norm(pos[i] - pos[j]))
        if w < 1e-12:
            continue
        if edge_free(pos[i], pos[j]):
            edges.append((i, j, w))
        elif (i, j) in warm_edges:
            edges.append((i, j, w))
            stale.add((i, j))
    return edges, stale


def optimize(warm: DecisionTree, edge_free, point_free,
             rrt_positions: np.ndarray,
             cfg: SteinerConfig | None = None,
             cancel: threading.Event | None = None,
             on_improve=None,
             max_iterations: int = 60) -> tuple[DecisionTree, OptimizeInfo]:
    """Compact a feasible warm-start tree toward a local Steiner minimum.

    edge_free(p, q) and point_free(p) are planar feasibility queries;
    rrt_positions is an (M, 2) array of roadmap node positions used for
    median snapping. Accepts a new tree only when its cost improves by more
    than the relative tolerance; each accepted tree is announced through
    on_improve and is itself a valid result (anytime contract). A cancel
    event is honored between iterations.
    """
    cfg = cfg or SteinerConfig()
    info = OptimizeInfo(warm_cost=warm.total_cost)
    best = warm
    rrt = np.atleast_2d(np.asarray(rrt_positions, dtype=float)) \
        if rrt_positions is not None and len(rrt_positions) else np.empty((0, 2))

    if len(warm.terminal_indices()) == 0:
        return best, info

    current = warm
    for _ in range(max_iterations):
        if cancel is not None and cancel.is_set():
            break
        info.iterations += 1

        cloud = _Cloud(
            positions=[current.positions[i].copy() for i in range(current.n)],
            tags=list(current.tags),
            vp_ids=list(current.vp_ids))
        taken = {cloud.key(p) for p in cloud.positions}
        warm_edges = {(min(p, i), max(p, i))
                      for i, p in enumerate(current.parents) if p is not None}

        # median candidates at branching nodes, deepest first
        ch = current.children()
        post = []
        stack = [(current.root_index, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                post.append(node)
                continue
            stack.append((node, True))
            for c in ch[node]:
                stack.append((c, False))
        for node in post:
            parent = current.parents[node]
            if len(ch[node]) < 1 or (len(ch[node]) == 1 and parent is None):
                continue
            proposals = []
            if len(ch[node]) >= 2:
                proposals.append(np.vstack([current.positions[node][None, :],
                                            current.positions[ch[node]]]))
                # junction relocation against the full neighborhood: holding
                # parent and children fixed, the optimal junction is their
                # geometric median (the 120-degree meeting point); the
                # self-anchored variant alone can stall short of it
                if parent is not None:
                    proposals.append(np.vstack([current.positions[parent][None, :],
                                                current.positions[ch[node]]]))
            else:
                # kinked pass-through (angle < 120 deg at an unprunable node,
                # e.g. an interior terminal): the wedge admits the same
                # splitting move via the median of parent, node and child
                proposals.append(np.vstack([current.positions[parent][None, :],
                                            current.positions[node][None, :],
                                            current.positions[ch[node]]]))
            for pts in proposals:
                s = weiszfeld_median(pts)
                if rrt.shape[0]:
                    d = np.linalg.norm(rrt - s, axis=1)
                    near = int(np.argmin(d))
                    if d[near] < cfg.snap_delta:
                        s = rrt[near].copy()
                # a proposal that converged (or snapped) onto an existing
                # node carries no new structure; near-duplicates would also
                # defeat the single-node escape deletions below
                if cloud.near_existing(s):
                    continue
                if point_free(s):
                    taken.add(cloud.key(s))
                    cloud.positions.append(np.asarray(s, dtype=float))
                    cloud.tags.append(STEINER)
                    cloud.vp_ids.append(None)

        edges, stale = _candidate_edges(cloud, warm_edges, edge_free, cfg, info)
        mst = kruskal_mst(len(cloud.positions), edges)
        root_idx = next(i for i, t in enumerate(cloud.tags) if t == ROOT)
        candidate = _tree_from_mst(cloud, mst.edges, root_idx, len(cloud.positions))
        if candidate is None:
            info.degraded = True
            break
        candidate = _smooth(candidate, edge_free)
        if stale:
            used = {(min(p, i), max(p, i))
                    for i, p in enumerate(candidate.parents) if p is not None}
            # stale pairs are indexed over the cloud; compare via positions
            pos_pairs = {tuple(sorted((cloud.key(cloud.positions[a]),
                                       cloud.key(cloud.positions[b]))))
                         for a, b in stale}
            for a, b in used:
                k = tuple(sorted((cloud.key(candidate.positions[a]),
                                  cloud.key(candidate.positions[b]))))
                if k in pos_pairs:
                    info.degraded = True

        threshold = cfg.rel_tolerance * max(best.total_cost, 1e-12)
        if candidate.total_cost >= best.total_cost - threshold:
            # escape move: a stale junction can beat the fresh medians while
            # the spanning tree is forced through it; try dropping one
            # non-terminal node at a time and keep the cheapest result
            for s in range(len(cloud.positions)):
                if cloud.tags[s] != STEINER:
                    continue
                edges_s = [e for e in edges if s not in e[:2]]
                mst_s = kruskal_mst(len(cloud.positions), edges_s)
                cand_s = _tree_from_mst(cloud, mst_s.edges, root_idx,
                                        len(cloud.positions))
                if cand_s is None:
                    continue
                cand_s = _smooth(cand_s, edge_free)
                if cand_s.total_cost < candidate.total_cost:
                    candidate = cand_s

        if candidate.total_cost < best.total_cost - threshold:
            best = candidate
            current = candidate
            info.accepted_costs.append(candidate.total_cost)
            if on_improve is not None:
                on_improve(candidate)
        else:
            break
    return best, info


def direct_mst_tree(warm: DecisionTree, edge_free) -> DecisionTree | None:
    """The spanning tree over just {root} union terminals with line-of-sight
    edges: a feasible tree that upper-bounds any sensible result. Returns
    None when line-of-sight cannot connect them."""
    idx = [warm.root_index] + warm.terminal_indices()
    cloud = _Cloud(
        positions=[warm.positions[i].copy() for i in idx],
        tags=[warm.tags[i] for i in idx],
        vp_ids=[warm.vp_ids[i] for i in idx])
    edges = []
    for i in range(len(idx)):
        for j in range(i + 1, len(idx)):
            w = float(np.linalg.norm(cloud.positions[i] - cloud.positions[j]))
            if w >= 1e-12 and edge_free(cloud.positions[i], cloud.positions[j]):
                edges.append((i, j, w))
    mst = kruskal_mst(len(idx), edges)
    if not mst.connected:
        return None
    return _tree_from_mst(cloud, mst.edges, 0, len(idx))


def optimize_with_baseline(warm: DecisionTree, edge_free, point_free,
                           rrt_positions, cfg: SteinerConfig | None = None,
                           cancel: threading.Event | None = None,
                           on_improve=None) -> tuple[DecisionTree, OptimizeInfo]:
    """optimize(), seeded with the better of the warm start and the direct
    terminals-only spanning tree, so the result never ends above the plain
    MST over {root} union terminals when line-of-sight permits it."""
    seed = warm
    direct = direct_mst_tree(warm, edge_free)
    if direct is not None and direct.total_cost < warm.total_cost:
        seed = direct
    tree, info = optimize(seed, edge_free, point_free, rrt_positions, cfg,
                          cancel=cancel, on_improve=on_improve)
    info.warm_cost = warm.total_cost
    return tree, info


def optimize_in_background(warm: DecisionTree, edge_free, point_free,
                           rrt_positions, cfg: SteinerConfig | None = None):
    """Run the optimizer on a worker thread.

    Returns (thread, holder, cancel_event): holder.best is the latest
    accepted tree at any moment; set cancel_event to stop between
    iterations, then join.
    """
    cancel = threading.Event()

    class Holder:
        best: DecisionTree = warm
        info: OptimizeInfo | None = None

    holder = Holder()

    def run():
        def improved(t):
            holder.best = t
        tree, info = optimize_with_baseline(
            warm, edge_free, point_free, rrt_positions, cfg,
            cancel=cancel, on_improve=improved)
        holder.best = tree
        holder.info = info

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread, holder, cancel
