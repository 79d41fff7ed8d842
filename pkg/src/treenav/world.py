"""Synthetic ground-truth voxel world and agent embodiment.

Stands in for a full robotics simulator: scenarios are loaded from a
canonical JSON document (or generated, see `scenarios`), the agent executes
six discrete actions, and sensing is an oracle over the true occupancy with
configurable synonym label noise. The label noise deliberately reproduces
the cross-frame inconsistency that the semantic merging stage exists to fix.

Depth convention: a hit distance is the entry distance of the first occupied
voxel along the ray. Hits closer than the sensor near plane are dropped from
the observation entirely (an RGB-D sensor reports invalid depth there), so
integration never carves through near surfaces.

The success judgment is a stand-in: the evaluated benchmark criterion is not
restated anywhere authoritative, so we fix a concrete testable rule (STOP
within `success_radius` of the nearest target-category box).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import AgentBody, SensorConfig
from .geometry import (
    Aabb,
    Frustum,
    Obb,
    Pose,
    batch_ray_first_hit,
    batch_segment_visible,
    normalize_angle,
)

MOVE_STEP = 0.25          # m per MOVE_FORWARD
TURN_STEP = math.radians(30.0)
PITCH_LIMIT = math.radians(60.0)

SCENARIO_FORMAT = "scenario-v1"


class Action(enum.Enum):
    MOVE_FORWARD = "MOVE_FORWARD"
    TURN_LEFT = "TURN_LEFT"
    TURN_RIGHT = "TURN_RIGHT"
    LOOK_UP = "LOOK_UP"
    LOOK_DOWN = "LOOK_DOWN"
    STOP = "STOP"


class ScenarioError(ValueError):
    """Scenario document parse failure or invariant violation."""


class EpisodeOver(RuntimeError):
    """Raised when stepping or sensing after the episode has ended."""


@dataclass
class GroundTruthEntity:
    gt_id: int
    category: str
    caption: str
    box_min: np.ndarray        # voxel index, inclusive
    box_max: np.ndarray        # voxel index, exclusive
    synonyms: list[str]

    def bbox(self, voxel_size: float) -> Aabb:
        return Aabb(min=self.box_min * voxel_size, max=self.box_max * voxel_size)

    def member_voxels(self) -> np.ndarray:
        ii, jj, kk = np.meshgrid(
            np.arange(self.box_min[0], self.box_max[0]),
            np.arange(self.box_min[1], self.box_max[1]),
            np.arange(self.box_min[2], self.box_max[2]),
            indexing="ij",
        )
        return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)


@dataclass
class Scenario:
    voxel_size: float
    grid_dims: tuple[int, int, int]
    start: Pose
    target_category: str
    entities: list[GroundTruthEntity]
    solids: list[dict]
    extra_voxels: list[tuple[int, int, int]] = field(default_factory=list)
    step_budget: int = 500
    success_radius: float = 1.0
    seed: int = 0
    agent: AgentBody = field(default_factory=AgentBody)
    name: str = "scenario"

    def occupancy(self) -> np.ndarray:
        """Expand solids plus single voxels into the boolean occupancy grid."""
        occ = np.zeros(self.grid_dims, dtype=bool)
        for solid in self.solids:
            if solid["kind"] != "box":
                raise ScenarioError(f"unknown solid kind {solid['kind']!r}")
            lo = np.asarray(solid["min"], dtype=int)
            hi = np.asarray(solid["max"], dtype=int)
            if np.any(lo < 0) or np.any(hi > self.grid_dims) or np.any(lo >= hi):
                raise ScenarioError(f"solid box out of range: {solid}")
            occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        for v in self.extra_voxels:
            occ[v[0], v[1], v[2]] = True
        return occ

    def target_boxes(self) -> list[Aabb]:
        return [e.bbox(self.voxel_size) for e in self.entities
                if e.category == self.target_category]


@dataclass
class Detection:
    label: str
    confidence: float
    mask_voxels: np.ndarray   # (M, 3) int indices, lexicographically sorted
    gt_id: int


@dataclass
class Observation:
    """One oracle sense: subsampled depth rays plus entity detections."""

    ray_dirs: np.ndarray       # (N, 3) unit directions in world frame
    ray_hits: np.ndarray       # (N,) distance in m, NaN where no hit
    detections: list[Detection]
    camera: Pose
    max_range: float = 5.0     # sensor far plane; misses carve out to here


# ---------------------------------------------------------------------------
# scenario document I/O
# ---------------------------------------------------------------------------


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "name": s.name,
        "voxel_size": s.voxel_size,
        "grid_dims": list(s.grid_dims),
        "start": {
            "position": [float(x) for x in s.start.position],
            "yaw": s.start.yaw,
            "pitch": s.start.pitch,
        },
        "target_category": s.target_category,
        "step_budget": s.step_budget,
        "success_radius": s.success_radius,
        "seed": s.seed,
        "agent": {
            "radius": s.agent.radius,
            "height": s.agent.height,
            "camera_height": s.agent.camera_height,
        },
        "solids": s.solids,
        "voxels": [list(v) for v in s.extra_voxels],
        "entities": [
            {
                "gt_id": e.gt_id,
                "category": e.category,
                "caption": e.caption,
                "box": [list(map(int, e.box_min)), list(map(int, e.box_max))],
                "synonyms": e.synonyms,
            }
            for e in s.entities
        ],
    }


def serialize_scenario(s: Scenario) -> str:
    """Canonical document text; load(serialize(s)) round-trips exactly."""
    return json.dumps(scenario_to_dict(s), sort_keys=True, indent=2) + "\n"


def load_scenario(text: str) -> Scenario:
    """Parse and fully validate a scenario document.

    Raises ScenarioError naming the offending field for both parse errors
    and invariant violations.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse: {exc}") from exc

    if data.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"format: expected {SCENARIO_FORMAT!r}")

    try:
        start_d = data["start"]
        start = Pose(
            np.asarray(start_d["position"], dtype=float),
            yaw=float(start_d.get("yaw", 0.0)),
            pitch=float(start_d.get("pitch", 0.0)),
        )
        agent_d = data.get("agent", {})
        scenario = Scenario(
            voxel_size=float(data.get("voxel_size", 0.05)),
            grid_dims=tuple(int(x) for x in data["grid_dims"]),
            start=start,
            target_category=str(data["target_category"]),
            entities=[
                GroundTruthEntity(
                    gt_id=int(e["gt_id"]),
                    category=str(e["category"]),
                    caption=str(e.get("caption", e["category"])),
                    box_min=np.asarray(e["box"][0], dtype=int),
                    box_max=np.asarray(e["box"][1], dtype=int),
                    synonyms=[str(x) for x in e.get("synonyms", [e["category"]])],
                )
                for e in data.get("entities", [])
            ],
            solids=data.get("solids", []),
            extra_voxels=[tuple(int(x) for x in v) for v in data.get("voxels", [])],
            step_budget=int(data.get("step_budget", 500)),
            success_radius=float(data.get("success_radius", 1.0)),
            seed=int(data.get("seed", 0)),
            agent=AgentBody(
                radius=float(agent_d.get("radius", 0.2)),
                height=float(agent_d.get("height", 1.0)),
                camera_height=float(agent_d.get("camera_height", 0.88)),
            ),
            name=str(data.get("name", "scenario")),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ScenarioError(f"parse: missing or malformed field {exc}") from exc

    validate_scenario(scenario)
    return scenario


def validate_scenario(s: Scenario) -> None:
    if s.step_budget <= 0:
        raise ScenarioError("step_budget: must be > 0")
    if s.voxel_size <= 0:
        raise ScenarioError("voxel_size: must be > 0")
    if not any(e.category == s.target_category for e in s.entities):
        raise ScenarioError(
            f"target_category: no entity matches {s.target_category!r}")
    occ = s.occupancy()
    for e in s.entities:
        if np.any(e.box_min < 0) or np.any(e.box_max > s.grid_dims):
            raise ScenarioError(f"entities[{e.gt_id}].box: out of grid")
        region = occ[e.box_min[0]:e.box_max[0],
                     e.box_min[1]:e.box_max[1],
                     e.box_min[2]:e.box_max[2]]
        if not np.all(region):
            raise ScenarioError(
                f"entities[{e.gt_id}]: member voxels not all occupied")
        if e.category not in e.synonyms:
            raise ScenarioError(
                f"entities[{e.gt_id}].synonyms: must contain the category")
    truth = TruthQueries(occ, s.voxel_size, s.agent)
    if not truth.position_ok(s.start.position):
        raise ScenarioError("start: not in free, supported space")


# ---------------------------------------------------------------------------
# ground-truth collision and support
# ---------------------------------------------------------------------------


def center_index_range(lo, hi, vs: float):
    """Inclusive voxel index range whose centers lie in [lo, hi] per axis.

    Centers sit at (i + 0.5) * vs; bounds are inclusive on both sides.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    i0 = np.ceil(lo / vs - 0.5).astype(int)
    i1 = np.floor(hi / vs - 0.5).astype(int)
    return i0, i1


class TruthQueries:
    """Collision/support predicates against the true occupancy.

    Uses the same voxel-center membership style as the belief-side checks so
    that a plan feasible in a fully known belief is feasible in truth.
    """

    def __init__(self, occupied: np.ndarray, voxel_size: float, agent: AgentBody):
        self.occupied = occupied
        self.vs = voxel_size
        self.agent = agent
        self.dims = np.asarray(occupied.shape)

    def _centers_in_box(self, lo, hi):
        """Voxel indices whose centers fall inside the world-space box."""
        i0, i1 = center_index_range(lo, hi, self.vs)
        i0 = np.maximum(i0, 0)
        i1 = np.minimum(i1, self.dims - 1)
        if np.any(i0 > i1):
            return None
        return i0, i1

    def cylinder_free(self, position) -> bool:
        """No occupied voxel center inside the agent cylinder at position."""
        p = np.asarray(position, dtype=float)
        r, h = self.agent.radius, self.agent.height
        box = self._centers_in_box(p - [r, r, 0.0], p + [r, r, h])
        if box is None:
            return True
        i0, i1 = box
        sub = self.occupied[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1]
        if not sub.any():
            return True
        idx = np.argwhere(sub) + i0
        centers = (idx + 0.5) * self.vs
        horiz = np.linalg.norm(centers[:, :2] - p[:2], axis=1)
        vert = (centers[:, 2] >= p[2]) & (centers[:, 2] <= p[2] + h)
        return not np.any((horiz <= r) & vert)

    def supported(self, position, ratio: float = 0.5, slab_voxels: int = 2) -> bool:
        """Occupied fraction in the slab just below the base >= ratio.

        The denominator counts lattice slots including out-of-grid ones, so
        map edges read as unsupported rather than inflated.
        """
        p = np.asarray(position, dtype=float)
        r = self.agent.radius
        vs = self.vs
        z1 = p[2]
        z0 = z1 - slab_voxels * vs
        i0, i1 = center_index_range(
            [p[0] - r, p[1] - r, z0], [p[0] + r, p[1] + r, z1], vs)
        total = int(np.prod(np.maximum(i1 - i0 + 1, 0)))
        if total == 0:
            return False
        lo = np.maximum(i0, 0)
        hi = np.minimum(i1, self.dims - 1)
        if np.any(lo > hi):
            return False
        occ = int(self.occupied[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1].sum())
        return occ / total >= ratio

    def sweep_free(self, p, q) -> bool:
        """Swept-cylinder (as an OBB) move from p to q hits nothing."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        seg = q[:2] - p[:2]
        length = float(np.linalg.norm(seg))
        r, h = self.agent.radius, self.agent.height
        if length < 1e-12:
            return self.cylinder_free(p)
        axis = np.array([seg[0] / length, seg[1] / length, 0.0])
        side = np.array([-axis[1], axis[0], 0.0])
        up = np.array([0.0, 0.0, 1.0])
        mid = 0.5 * (p + q) + np.array([0.0, 0.0, h / 2.0])
        obb = Obb(
            center=mid,
            half_extents=np.array([length / 2.0 + r, r, h / 2.0]),
            rotation=np.stack([axis, side, up], axis=1),
        )
        lo = obb.center - np.abs(obb.rotation) @ obb.half_extents
        hi = obb.center + np.abs(obb.rotation) @ obb.half_extents
        box = self._centers_in_box(lo, hi)
        if box is None:
            return True
        i0, i1 = box
        sub = self.occupied[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1]
        if not sub.any():
            return True
        idx = np.argwhere(sub) + i0
        centers = (idx + 0.5) * self.vs
        return not bool(obb.contains(centers).any())

    def position_ok(self, position) -> bool:
        return self.cylinder_free(position) and self.supported(position)


# ---------------------------------------------------------------------------
# the world state machine
# ---------------------------------------------------------------------------


class World:
    """Single-owner mutable episode state; observations it emits are values.

    Determinism: the label/confidence stream is a function of
    (scenario.seed, run_seed) and the action sequence alone.
    """

    def __init__(self, scenario: Scenario, sensor: SensorConfig | None = None,
                 run_seed: int = 0):
        self.scenario = scenario
        self.sensor = sensor or SensorConfig()
        self.occupied = scenario.occupancy()
        self.truth = TruthQueries(self.occupied, scenario.voxel_size, scenario.agent)
        self.agent_pose = scenario.start
        self.steps_taken = 0
        self.stop_called = False
        self.active = True
        self.collisions = 0
        self._rng = np.random.default_rng(
            np.random.SeedSequence([scenario.seed & 0x7FFFFFFF, run_seed & 0x7FFFFFFF]))
        self._ray_grid = self._build_ray_grid()

    # -- embodiment ---------------------------------------------------------

    def camera_pose(self) -> Pose:
        p = self.agent_pose
        cam = p.position + np.array([0.0, 0.0, self.scenario.agent.camera_height])
        return Pose(cam, yaw=p.yaw, pitch=p.pitch)

    def steps_remaining(self) -> int:
        return self.scenario.step_budget - self.steps_taken

    def step(self, action: Action):
        """Apply one discrete action.

        Returns (pose, collided, stop_called). A blocked MOVE_FORWARD leaves
        the pose unchanged and reports collided=True (no sliding).
        """
        if not self.active:
            raise EpisodeOver("episode has ended")
        collided = False
        p = self.agent_pose
        if action is Action.MOVE_FORWARD:
            delta = np.array([math.cos(p.yaw), math.sin(p.yaw), 0.0]) * MOVE_STEP
            dest = p.position + delta
            if self.truth.position_ok(dest) and self.truth.sweep_free(p.position, dest):
                self.agent_pose = Pose(dest, yaw=p.yaw, pitch=p.pitch)
            else:
                collided = True
                self.collisions += 1
        elif action is Action.TURN_LEFT:
            self.agent_pose = Pose(p.position, yaw=p.yaw + TURN_STEP, pitch=p.pitch)
        elif action is Action.TURN_RIGHT:
            self.agent_pose = Pose(p.position, yaw=p.yaw - TURN_STEP, pitch=p.pitch)
        elif action is Action.LOOK_UP:
            pitch = min(p.pitch + TURN_STEP, PITCH_LIMIT)
            self.agent_pose = Pose(p.position, yaw=p.yaw, pitch=pitch)
        elif action is Action.LOOK_DOWN:
            pitch = max(p.pitch - TURN_STEP, -PITCH_LIMIT)
            self.agent_pose = Pose(p.position, yaw=p.yaw, pitch=pitch)
        elif action is Action.STOP:
            self.stop_called = True
            self.active = False
        else:  # pragma: no cover
            raise ValueError(f"unknown action {action}")

        self.steps_taken += 1
        if self.steps_taken >= self.scenario.step_budget:
            self.active = False
        return self.agent_pose, collided, self.stop_called

    # -- sensing ------------------------------------------------------------

    def _build_ray_grid(self) -> np.ndarray:
        """Camera-frame ray directions for the subsampled pixel grid."""
        s = self.sensor
        th = math.tan(s.hfov / 2.0)
        tv = math.tan(s.vfov / 2.0)
        us = (2.0 * (np.arange(s.rays_x) + 0.5) / s.rays_x) - 1.0
        vs_ = 1.0 - (2.0 * (np.arange(s.rays_y) + 0.5) / s.rays_y)
        uu, vv = np.meshgrid(us, vs_, indexing="xy")
        dirs = np.stack(
            [np.ones_like(uu), uu * th, vv * tv], axis=-1).reshape(-1, 3)
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def frustum(self, pose: Pose | None = None) -> Frustum:
        s = self.sensor
        return Frustum(pose=pose or self.camera_pose(),
                       hfov=s.hfov, vfov=s.vfov, near=s.near, far=s.far)

    def sense(self) -> Observation:
        """Depth from ray casting plus oracle detections with label noise.

        Every entity with at least one unoccluded member voxel inside the
        frustum is detected; its label is drawn from the synonym list and
        its confidence from clamp(0.9 - |N(0, 0.05)|, 0.3, 1.0).
        """
        if not self.active:
            raise EpisodeOver("episode has ended")
        cam = self.camera_pose()
        fwd, right, up = cam.axes()
        rot = np.stack([fwd, right, up], axis=1)  # camera -> world
        world_dirs = self._ray_grid @ rot.T

        hit, _, t_hit = batch_ray_first_hit(
            cam.position, world_dirs, self.sensor.far,
            self.occupied, self.scenario.voxel_size)

        keep = ~hit | (t_hit >= self.sensor.near)  # drop sub-near returns
        dirs = world_dirs[keep]
        dists = np.where(hit[keep], t_hit[keep], np.nan)

        detections = []
        frustum = self.frustum(cam)
        vs = self.scenario.voxel_size
        for ent in sorted(self.scenario.entities, key=lambda e: e.gt_id):
            voxels = ent.member_voxels()
            centers = (voxels + 0.5) * vs
            in_view = frustum.contains_many(centers)
            if not in_view.any():
                continue
            cand = voxels[in_view]
            vis = batch_segment_visible(
                cam.position, (cand + 0.5) * vs, self.occupied, vs)
            if not vis.any():
                continue
            mask_voxels = cand[vis]
            order = np.lexsort((mask_voxels[:, 2], mask_voxels[:, 1], mask_voxels[:, 0]))
            label = ent.synonyms[int(self._rng.integers(len(ent.synonyms)))]
            confidence = float(np.clip(0.9 - abs(self._rng.normal(0.0, 0.05)), 0.3, 1.0))
            detections.append(Detection(
                label=label, confidence=confidence,
                mask_voxels=mask_voxels[order], gt_id=ent.gt_id))
        return Observation(ray_dirs=dirs, ray_hits=dists,
                           detections=detections, camera=cam,
                           max_range=self.sensor.far)


def judge(pose: Pose, stop_called: bool, scenario: Scenario) -> bool:
    """Episode success: STOP was called within success_radius of the nearest
    target-category box (Euclidean point-to-box distance)."""
    if not stop_called:
        return False
    boxes = scenario.target_boxes()
    if not boxes:
        return False
    d = min(b.distance_to_point(pose.position) for b in boxes)
    return d <= scenario.success_radius


__all__ = [
    "Action", "Detection", "EpisodeOver", "GroundTruthEntity", "Observation",
    "Scenario", "ScenarioError", "TruthQueries", "World", "judge",
    "load_scenario", "serialize_scenario", "validate_scenario",
    "MOVE_STEP", "TURN_STEP", "PITCH_LIMIT", "normalize_angle",
]
