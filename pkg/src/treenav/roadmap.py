"""Continuously maintained tree of collision-free, supported paths rooted at
the agent: hybrid local/global sampling, lowest-cost-neighbor insertion with
rewiring, rerooting to the moving agent, and region-scoped revalidation when
the belief changes.

Planning is planar at the agent's base height; support and swept-volume
checks consult the 3D belief. Single-writer; `snapshot()` exports an
immutable structural copy in O(nodes).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .belief import _BeliefReads
from .config import RoadmapConfig
from .geometry import Aabb


@dataclass
class RoadmapNode:
    node_id: int
    position: np.ndarray            # (2,) planar, meters
    parent: int | None
    cost_to_root: float
    children: set[int] = field(default_factory=set)


@dataclass
class RevalidateReport:
    checked_edges: int = 0
    removed: list[int] = field(default_factory=list)
    reattached: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class RoadmapSnapshot:
    """Immutable structural copy: positions, parents, costs."""

    root_id: int
    positions: dict[int, tuple[float, float]]
    parents: dict[int, int | None]
    costs: dict[int, float]

    def children_of(self, node_id: int) -> list[int]:
        return sorted(i for i, p in self.parents.items() if p == node_id)

    def path_to(self, node_id: int) -> list[int]:
        path = [node_id]
        while self.parents[path[-1]] is not None:
            path.append(self.parents[path[-1]])
        return path[::-1]

    def export_text(self) -> str:
        return json.dumps({
            "root": self.root_id,
            "nodes": [
                {"id": i, "x": self.positions[i][0], "y": self.positions[i][1],
                 "parent": self.parents[i], "cost": self.costs[i]}
                for i in sorted(self.positions)
            ],
        }, sort_keys=True, indent=2) + "\n"


NO_SUPPORT = "no-support"
NO_FEASIBLE_EDGE = "no-feasible-edge"


class RoadmapTree:
    """Agent-rooted tree over free space with RRT*-style rewiring."""

    def __init__(self, root_xy, base_z: float, cfg: RoadmapConfig | None = None):
        self.cfg = cfg or RoadmapConfig()
        self.base_z = float(base_z)
        self.nodes: dict[int, RoadmapNode] = {}
        self._next_id = 0
        self._cell: dict[tuple[int, int], set[int]] = {}
        root = self._new_node(np.asarray(root_xy, dtype=float), parent=None, cost=0.0)
        self.root_id = root.node_id

    # -- bookkeeping ---------------------------------------------------------

    def _new_node(self, xy: np.ndarray, parent: int | None, cost: float) -> RoadmapNode:
        node = RoadmapNode(self._next_id, xy.copy(), parent, cost)
        self.nodes[node.node_id] = node
        self._next_id += 1
        self._cell.setdefault(self._cell_of(xy), set()).add(node.node_id)
        if parent is not None:
            self.nodes[parent].children.add(node.node_id)
        return node

    def _cell_of(self, xy) -> tuple[int, int]:
        r = self.cfg.neighbor_radius
        return (int(math.floor(xy[0] / r)), int(math.floor(xy[1] / r)))

    def _drop_from_index(self, node: RoadmapNode) -> None:
        cell = self._cell_of(node.position)
        self._cell.get(cell, set()).discard(node.node_id)

    def neighbors_within(self, xy, radius: float) -> list[int]:
        """Node ids within radius of xy, ascending id order."""
        r = self.cfg.neighbor_radius
        c0 = (int(math.floor((xy[0] - radius) / r)), int(math.floor((xy[1] - radius) / r)))
        c1 = (int(math.floor((xy[0] + radius) / r)), int(math.floor((xy[1] + radius) / r)))
        out = []
        p = np.asarray(xy, dtype=float)
        for cx in range(c0[0], c1[0] + 1):
            for cy in range(c0[1], c1[1] + 1):
                for nid in self._cell.get((cx, cy), ()):
                    if np.linalg.norm(self.nodes[nid].position - p) <= radius:
                        out.append(nid)
        return sorted(out)

    def has_node_within(self, xy, radius: float) -> bool:
        """Cheap density probe used to keep sampling from piling nodes up."""
        r = self.cfg.neighbor_radius
        c0 = (int(math.floor((xy[0] - radius) / r)), int(math.floor((xy[1] - radius) / r)))
        c1 = (int(math.floor((xy[0] + radius) / r)), int(math.floor((xy[1] + radius) / r)))
        p = np.asarray(xy, dtype=float)
        for cx in range(c0[0], c1[0] + 1):
            for cy in range(c0[1], c1[1] + 1):
                for nid in self._cell.get((cx, cy), ()):
                    if np.linalg.norm(self.nodes[nid].position - p) <= radius:
                        return True
        return False

    def nearest_node(self, xy) -> int:
        p = np.asarray(xy, dtype=float)
        best, best_d = None, math.inf
        for nid, node in self.nodes.items():
            d = float(np.linalg.norm(node.position - p))
            if d < best_d or (d == best_d and (best is None or nid < best)):
                best, best_d = nid, d
        return best

    def pos3(self, xy) -> np.ndarray:
        return np.array([xy[0], xy[1], self.base_z])

    def __len__(self) -> int:
        return len(self.nodes)

    # -- sampling -------------------------------------------------------------

    def sample_candidate(self, agent_xy, belief: _BeliefReads, rng) -> np.ndarray:
        """Hybrid sampling: local disc around the agent while its vicinity is
        sparse, otherwise uniform over the known-map bounding rectangle.
        Samples are clipped to the map bounds."""
        agent = np.asarray(agent_xy, dtype=float)
        extent = np.asarray(belief.dims[:2]) * belief.vs
        local_count = len(self.neighbors_within(agent, self.cfg.local_radius))
        if local_count < self.cfg.local_density:
            radius = self.cfg.local_radius * math.sqrt(rng.random())
            angle = 2 * math.pi * rng.random()
            xy = agent + radius * np.array([math.cos(angle), math.sin(angle)])
        else:
            bounds = self._known_bounds_xy(belief)
            if bounds is None:
                radius = self.cfg.local_radius * math.sqrt(rng.random())
                angle = 2 * math.pi * rng.random()
                xy = agent + radius * np.array([math.cos(angle), math.sin(angle)])
            else:
                lo, hi = bounds
                xy = lo + rng.random(2) * (hi - lo)
        return np.clip(xy, 0.0, extent)

    @staticmethod
    def _known_bounds_xy(belief: _BeliefReads):
        from .belief import UNKNOWN

        known = belief.state != UNKNOWN
        xs = np.nonzero(known.any(axis=(1, 2)))[0]
        ys = np.nonzero(known.any(axis=(0, 2)))[0]
        if xs.size == 0:
            return None
        vs = belief.vs
        return (np.array([xs[0] * vs, ys[0] * vs]),
                np.array([(xs[-1] + 1) * vs, (ys[-1] + 1) * vs]))

    # -- insertion with rewiring ------------------------------------------------

    def insert(self, candidate, belief: _BeliefReads):
        """Try to add a node at candidate.

        Returns (node_id, None) on success or (None, reason) where reason is
        NO_SUPPORT or NO_FEASIBLE_EDGE. On success the node hangs off the
        neighbor minimizing cost-to-root plus edge length, and any neighbor
        that gets strictly cheaper through the new node is rewired.
        """
        xy = np.asarray(candidate, dtype=float)
        if not belief.check_support(self.pos3(xy)):
            return None, NO_SUPPORT
        neighbor_ids = self.neighbors_within(xy, self.cfg.neighbor_radius)
        options = []
        for nid in neighbor_ids:
            node = self.nodes[nid]
            d = float(np.linalg.norm(node.position - xy))
            if d < 1e-9:
                continue  # duplicate position, never stack nodes
            if belief.check_edge(self.pos3(xy), self.pos3(node.position)):
                options.append((node.cost_to_root + d, nid, d))
        if not options:
            return None, NO_FEASIBLE_EDGE
        options.sort(key=lambda t: (t[0], t[1]))
        total, parent_id, d = options[0]
        new = self._new_node(xy, parent=parent_id, cost=total)

        # rewire: neighbors that become cheaper through the new node
        for _, nid, d_nb in options:
            if nid == parent_id:
                continue
            node = self.nodes[nid]
            through = new.cost_to_root + d_nb
            if through < node.cost_to_root - 1e-12:
                self._reparent(nid, new.node_id, through)
        return new.node_id, None

    def _reparent(self, nid: int, new_parent: int, new_cost: float) -> None:
        node = self.nodes[nid]
        if node.parent is not None:
            self.nodes[node.parent].children.discard(nid)
        node.parent = new_parent
        self.nodes[new_parent].children.add(nid)
        delta = new_cost - node.cost_to_root
        stack = [nid]
        while stack:
            cur = self.nodes[stack.pop()]
            cur.cost_to_root += delta
            stack.extend(cur.children)

    # -- rerooting ---------------------------------------------------------------

    def reroot(self, agent_xy, belief: _BeliefReads) -> int:
        """Move the root to the agent: the nearest node, or a fresh node at
        the agent position when none is within epsilon. Parent links along
        the old-root path are reversed and all costs recomputed."""
        agent = np.asarray(agent_xy, dtype=float)
        nearest = self.nearest_node(agent)
        if float(np.linalg.norm(self.nodes[nearest].position - agent)) > self.cfg.reroot_epsilon:
            nid, _ = self.insert(agent, belief)
            if nid is not None:
                nearest = nid
        if nearest == self.root_id:
            return self.root_id

        # reverse the chain from the new root up to the old root
        chain = [nearest]
        while self.nodes[chain[-1]].parent is not None:
            chain.append(self.nodes[chain[-1]].parent)
        for child, parent in zip(chain, chain[1:]):
            self.nodes[parent].children.discard(child)
            self.nodes[child].children.add(parent)
            self.nodes[parent].parent = child
        self.nodes[nearest].parent = None
        self.root_id = nearest
        self._recompute_costs()
        return self.root_id

    def _recompute_costs(self) -> None:
        root = self.nodes[self.root_id]
        root.cost_to_root = 0.0
        stack = [self.root_id]
        while stack:
            cur = self.nodes[stack.pop()]
            for cid in cur.children:
                child = self.nodes[cid]
                child.cost_to_root = cur.cost_to_root + float(
                    np.linalg.norm(child.position - cur.position))
                stack.append(cid)

    # -- paths ---------------------------------------------------------------------

    def shortest_path(self, target: int) -> list[int]:
        """Root-to-target node id list along parent links."""
        if target not in self.nodes:
            raise KeyError(f"unknown node id {target}")
        path = [target]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path[::-1]

    def path_positions(self, target: int) -> np.ndarray:
        return np.array([self.nodes[i].position for i in self.shortest_path(target)])

    # -- revalidation -----------------------------------------------------------------

    def revalidate(self, region: Aabb, belief: _BeliefReads) -> RevalidateReport:
        """Re-check every stored edge touching the changed region; reattach
        children whose parent edge died to their best feasible neighbor, or
        remove their whole subtree when nothing reconnects them."""
        report = RevalidateReport()
        lo = np.asarray(region.min[:2], dtype=float)
        hi = np.asarray(region.max[:2], dtype=float)

        # BFS order: parents are validated before their descendants
        order = []
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            for cid in sorted(self.nodes[nid].children):
                order.append(cid)
                stack.append(cid)

        removed_set: set[int] = set()
        for nid in order:
            if nid in removed_set or nid not in self.nodes:
                continue
            node = self.nodes[nid]
            parent = self.nodes[node.parent]
            if not _segment_touches_rect(parent.position, node.position, lo, hi):
                continue
            report.checked_edges += 1
            if belief.check_edge(self.pos3(parent.position), self.pos3(node.position)):
                continue
            # the stored edge died: try the best alternative neighbor
            subtree = self._subtree_ids(nid)
            best = None
            for cand in self.neighbors_within(node.position, self.cfg.neighbor_radius):
                if cand in subtree or cand in removed_set:
                    continue
                other = self.nodes[cand]
                d = float(np.linalg.norm(other.position - node.position))
                if d < 1e-9:
                    continue
                if not belief.check_edge(self.pos3(node.position), self.pos3(other.position)):
                    continue
                key = (other.cost_to_root + d, cand)
                if best is None or key < best[:2]:
                    best = (other.cost_to_root + d, cand, d)
            if best is not None:
                cost, new_parent, _ = best
                self._reparent(nid, new_parent, cost)
                report.reattached.append((nid, new_parent))
            else:
                for dead in subtree:
                    removed_set.add(dead)
        for dead in removed_set:
            node = self.nodes.pop(dead)
            self._drop_from_index(node)
            if node.parent is not None and node.parent in self.nodes:
                self.nodes[node.parent].children.discard(dead)
        report.removed = sorted(removed_set)
        return report

    def _subtree_ids(self, nid: int) -> set[int]:
        out = {nid}
        stack = [nid]
        while stack:
            for cid in self.nodes[stack.pop()].children:
                out.add(cid)
                stack.append(cid)
        return out

    # -- snapshot -------------------------------------------------------------------

    def snapshot(self) -> RoadmapSnapshot:
        return RoadmapSnapshot(
            root_id=self.root_id,
            positions={i: (float(n.position[0]), float(n.position[1]))
                       for i, n in self.nodes.items()},
            parents={i: n.parent for i, n in self.nodes.items()},
            costs={i: n.cost_to_root for i, n in self.nodes.items()},
        )


def _segment_touches_rect(p, q, lo, hi) -> bool:
    """2D segment vs axis-aligned rectangle overlap (Liang-Barsky)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q - p
    t0, t1 = 0.0, 1.0
    for ax in range(2):
        if abs(d[ax]) < 1e-12:
            if p[ax] < lo[ax] or p[ax] > hi[ax]:
                return False
            continue
        ta = (lo[ax] - p[ax]) / d[ax]
        tb = (hi[ax] - p[ax]) / d[ax]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return False
    return True
