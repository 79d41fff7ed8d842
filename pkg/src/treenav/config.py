"""Runtime configuration: one flat dataclass per subsystem, a full-default
dump for reproducibility, and a stable content hash.

The occupancy log-odds constants and the support threshold are stand-ins
chosen for responsive single-observation mapping; they are not calibrated
against any particular sensor and are fully configurable here.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields


@dataclass
class AgentBody:
    radius: float = 0.2          # m, cylinder
    height: float = 1.0          # m
    camera_height: float = 0.88  # m above the base


@dataclass
class SensorConfig:
    hfov_deg: float = 79.0
    near: float = 0.5
    far: float = 5.0
    rays_x: int = 64   # 640x480 subsampled 10x; raise for full resolution
    rays_y: int = 48

    @property
    def hfov(self) -> float:
        return math.radians(self.hfov_deg)

    @property
    def vfov(self) -> float:
        # 4:3 sensor: derive the vertical opening from the horizontal one
        return 2.0 * math.atan(math.tan(self.hfov / 2.0) * 0.75)


@dataclass
class BeliefConfig:
    log_odds_hit: float = 2.2
    log_odds_miss: float = -0.85
    log_odds_clamp: float = 3.5
    occupied_threshold: float = 0.85
    free_threshold: float = -0.85
    support_ratio: float = 0.5
    support_slab_voxels: int = 2


@dataclass
class RoadmapConfig:
    neighbor_radius: float = 1.0
    local_radius: float = 3.0      # R_local of the hybrid sampler
    local_density: int = 10        # k_local
    samples_per_epoch: int = 200
    reroot_epsilon: float = 0.1
    min_spacing: float = 0.3       # density guard: skip samples closer than
                                   # this to an existing node


@dataclass
class ViewpointConfig:
    spacing: float = 1.25          # Poisson-disc radius
    gain_threshold: int = 10       # strictly-greater gate
    headings: int = 12             # 30 deg bins


@dataclass
class SteinerConfig:
    snap_delta: float = 0.25
    rel_tolerance: float = 1e-6
    edge_cap_nodes: int = 300      # above this, restrict MST candidates
    edge_cap_knn: int = 12


@dataclass
class SemanticConfig:
    cluster_eps_voxels: float = 3.0   # eps = this * voxel_size
    cluster_min_pts: int = 5
    iou_track_threshold: float = 0.5
    ios_merge_threshold: float = 0.3
    sim_merge_threshold: float = 0.8
    retire_after_epochs: int = 20


@dataclass
class PolicyConfig:
    heading_tolerance_deg: float = 15.0
    free_choice_cone_deg: float = 45.0
    waypoint_radius: float = 0.25
    abstain_below: int = 25
    unknown_bonus_per_m3: float = 2.0
    unknown_bonus_cap: float = 20.0


@dataclass
class NarrationConfig:
    sample_step: float = 0.25
    panoramic_headings: int = 12


@dataclass
class HarnessConfig:
    epoch_stride: int = 25
    proprio_radius: float = 0.45   # self-clearing bubble; see belief docs
    bootstrap_sweep: bool = True
    parallel_narration: bool = False


@dataclass
class Config:
    agent: AgentBody = field(default_factory=AgentBody)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    roadmap: RoadmapConfig = field(default_factory=RoadmapConfig)
    viewpoints: ViewpointConfig = field(default_factory=ViewpointConfig)
    steiner: SteinerConfig = field(default_factory=SteinerConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    narration: NarrationConfig = field(default_factory=NarrationConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def dump(self) -> str:
        """Canonical JSON dump of every value, defaults included."""
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for f in fields(cls):
            section = data.get(f.name)
            if section is None:
                continue
            sub = getattr(cfg, f.name)
            for key, value in section.items():
                if not hasattr(sub, key):
                    raise ValueError(f"unknown config key {f.name}.{key}")
                setattr(sub, key, type(getattr(sub, key))(value))
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dump())
