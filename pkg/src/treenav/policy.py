"""The hierarchical policy: event-triggered deliberation over the decision
tree's root subtrees, a geometric fallback when semantics abstain, and the
local executor that turns a committed path into discrete actions with an
information-gain-aware choice of camera heading.

Commitment economy: once an option is chosen, the agent traverses
non-branching stretches without invoking the backend again; only
decision-relevant changes re-engage it (arriving at a branching root,
losing a committed node, or a rewire of the committed chain). Changes
outside the committed subtree are deferred.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .belief import _BeliefReads
from .config import PolicyConfig, SensorConfig
from .decision import TERMINAL, DecisionTree, TreeSnapshot, Viewpoint
from .geometry import Frustum, Pose, normalize_angle
from .narration import OptionCaption
from .semantics import Entity
from .world import MOVE_STEP, TURN_STEP, Action

# trigger reasons, in priority order
NO_COMMITMENT = "no-commitment"
BRANCHING_ROOT = "branching-root"
COMMITTED_NODE_REMOVED = "committed-node-removed"
TOPOLOGY_REWIRED = "topology-rewired"

STEINER_MATCH_RADIUS = 0.25  # one action step; junctions jitter below this


@dataclass
class Commitment:
    """The chosen root subtree, pinned by the nodes the agent will traverse.

    Terminals are identified by viewpoint id (stable across snapshots);
    junction nodes by position, matched with a one-step tolerance.
    """

    target_vp: int
    node_keys: list[tuple] = field(default_factory=list)
    epoch: int = 0

    @staticmethod
    def key_for(tree: DecisionTree, index: int) -> tuple:
        if tree.tags[index] == TERMINAL:
            return ("vp", tree.vp_ids[index])
        return ("pos", (round(float(tree.positions[index][0]), 6),
                        round(float(tree.positions[index][1]), 6)))

    @classmethod
    def for_path(cls, tree: DecisionTree, path: list[int], target_vp: int,
                 epoch: int) -> "Commitment":
        return cls(target_vp=target_vp,
                   node_keys=[cls.key_for(tree, i) for i in path],
                   epoch=epoch)

    def locate(self, tree: DecisionTree, key: tuple) -> int | None:
        if key[0] == "vp":
            return tree.index_of_vp(key[1])
        target = np.asarray(key[1], dtype=float)
        d = np.linalg.norm(tree.positions - target, axis=1)
        best = int(np.argmin(d))
        return best if d[best] <= STEINER_MATCH_RADIUS else None


def should_invoke(snapshot: TreeSnapshot, commitment: Commitment | None,
                  agent_at_root: bool):
    """First applicable re-invocation trigger, or None.

    Priority: no commitment while options exist; agent at a branching root;
    a committed node vanished; the surviving committed chain was rewired.
    Changes outside the committed chain never trigger (deferral).
    """
    tree = snapshot.tree
    options = snapshot.root_subtrees()
    if commitment is None:
        return NO_COMMITMENT if options else None
    if agent_at_root and len(options) >= 2:
        return BRANCHING_ROOT

    surviving: list[int] = []
    for key in commitment.node_keys:
        idx = commitment.locate(tree, key)
        if idx is None:
            return COMMITTED_NODE_REMOVED
        surviving.append(idx)

    for a, b in zip(surviving, surviving[1:]):
        # b must still hang below a (new intermediates are fine)
        cur = b
        ok = False
        while cur is not None:
            if cur == a:
                ok = True
                break
            cur = tree.parents[cur]
        if not ok:
            return TOPOLOGY_REWIRED
    return None


def decide(target: str, options: list[OptionCaption], backend):
    """Score the options; returns (selected index or None, ScoreSheet).

    Selection is argmax with ties to the lowest index; abstention (or a
    backend failure, which reads as abstention) returns None.
    """
    from .backends import ScoreSheet

    if not options:
        raise ValueError("decide requires at least one option")
    try:
        sheet = backend.decide(target, options)
    except Exception as exc:
        sheet = ScoreSheet(scores=[0] * len(options), abstained=True,
                           rationale=[f"backend error: {exc}"] * len(options))
    if sheet.abstained:
        return None, sheet
    best = max(range(len(sheet.scores)), key=lambda i: (sheet.scores[i], -i))
    return best, sheet


def fallback_target(snapshot: TreeSnapshot, viewpoints: list[Viewpoint]):
    """Nearest informative viewpoint by tree path length (tie: lowest id);
    None signals exploration exhausted."""
    live = [vp for vp in viewpoints if vp.informative]
    if not live:
        return None
    tree = snapshot.tree
    depth = tree.depth_from_root()
    best = None
    for vp in sorted(live, key=lambda v: v.vp_id):
        idx = tree.index_of_vp(vp.vp_id)
        if idx is None:
            continue
        key = (float(depth[idx]), vp.vp_id)
        if best is None or key < best[:2]:
            best = (key[0], key[1], vp.vp_id)
    if best is None:
        return sorted(live, key=lambda v: v.vp_id)[0].vp_id
    return best[2]


def target_detected(entities: list[Entity], target: str, provider,
                    tau_sim: float = 0.8):
    """A live entity whose label matches the target category exactly or by
    embedding similarity; lowest id wins. None when nothing relates."""
    matches = []
    for ent in entities:
        if ent.label == target or provider.similarity(ent.label, target) >= tau_sim:
            matches.append(ent)
    if not matches:
        return None
    return min(matches, key=lambda e: e.entity_id)


class FollowController:
    """Emits one discrete action per call along a committed waypoint path.

    Turns toward the next waypoint when the heading error exceeds the
    tolerance, otherwise advances; pops a panoramic sweep (LOOK_DOWN, full
    turn circle, LOOK_UP) on arrival at a committed informative viewpoint.
    At the start of each segment, when several quantized headings lie inside
    the free-choice cone around the path direction, it spends one turn on
    the one with the highest information gain (camera enrichment; the next
    calls re-align toward the waypoint).

    next_action returns None when the path is exhausted or the next forward
    step is blocked in the belief (callers replan).
    """

    def __init__(self, path_xy: np.ndarray, viewpoint_waypoints: set[int],
                 base_z: float, sensor: SensorConfig,
                 cfg: PolicyConfig | None = None, peek: bool = True,
                 camera_height: float = 0.88):
        self.path = np.atleast_2d(np.asarray(path_xy, dtype=float))
        self.vp_waypoints = set(viewpoint_waypoints)
        self.base_z = base_z
        self.sensor = sensor
        self.cfg = cfg or PolicyConfig()
        self.peek = peek
        self.camera_height = camera_height
        self.index = 0
        self.queue: list[Action] = []
        self._swept: set[int] = set()
        self._peeked: set[int] = set()
        self.finished = False
        self.blocked = False

    def _sweep_actions(self) -> list[Action]:
        # full turn circle at travel pitch; viewpoint gains are evaluated at
        # the same pitch, so a completed sweep annuls the viewpoint's gain
        return [Action.TURN_LEFT] * 12

    def next_action(self, agent: Pose, belief: _BeliefReads):
        if self.queue:
            return self.queue.pop(0)
        pos = agent.position[:2]

        while self.index < len(self.path):
            d_here = float(np.linalg.norm(self.path[self.index] - pos))
            if d_here <= self.cfg.waypoint_radius:
                if self.index in self.vp_waypoints and self.index not in self._swept:
                    self._swept.add(self.index)
                    self.queue = self._sweep_actions()
                    self.index += 1
                    return self.queue.pop(0)
                self.index += 1
                continue
            # overshoot: a later waypoint already lies closer than this one
            if (self.index + 1 < len(self.path)
                    and float(np.linalg.norm(self.path[self.index + 1] - pos)) < d_here):
                self.index += 1
                continue
            break
        if self.index >= len(self.path):
            self.finished = True
            return None

        target = self.path[self.index]
        bearing = math.atan2(target[1] - pos[1], target[0] - pos[0])
        err = normalize_angle(bearing - agent.yaw)
        tol = math.radians(self.cfg.heading_tolerance_deg)
        if abs(err) > tol:
            return Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT

        if agent.pitch != 0.0:
            return Action.LOOK_UP if agent.pitch < 0 else Action.LOOK_DOWN

        if self.peek and self.index not in self._peeked:
            self._peeked.add(self.index)
            choice = self._gain_peek(agent, belief, bearing)
            if choice is not None:
                return choice

        dest = np.array([pos[0] + MOVE_STEP * math.cos(agent.yaw),
                         pos[1] + MOVE_STEP * math.sin(agent.yaw),
                         self.base_z])
        src = np.array([pos[0], pos[1], self.base_z])
        if not belief.check_edge(src, dest, occupied_only=True):
            self.blocked = True
            return None
        return Action.MOVE_FORWARD

    def _gain_peek(self, agent: Pose, belief: _BeliefReads, bearing: float):
        """One optional turn toward the quantized heading with the highest
        gain among those within the free-choice cone of the path bearing."""
        cone = math.radians(self.cfg.free_choice_cone_deg)
        cands = []
        for k in (-1, 0, 1):
            yaw = agent.yaw + k * TURN_STEP
            if abs(normalize_angle(yaw - bearing)) <= cone:
                cands.append((k, yaw))
        if len(cands) <= 1:
            return None
        cam = np.array([agent.position[0], agent.position[1],
                        self.base_z + self.camera_height])
        gains = {}
        for k, yaw in cands:
            f = Frustum(pose=Pose(cam, yaw=yaw), hfov=self.sensor.hfov,
                        vfov=self.sensor.vfov, near=self.sensor.near,
                        far=self.sensor.far)
            gains[k] = belief.info_gain(f)
        best_k = max(gains, key=lambda k: (gains[k], -abs(k)))
        if best_k == 0 or gains[best_k] <= gains.get(0, 0):
            return None
        return Action.TURN_LEFT if best_k > 0 else Action.TURN_RIGHT
