"""The agent's occupancy belief: a dense tri-state voxel grid under log-odds
updates, with the read-side queries every planner layer depends on
(information gain, support, swept-edge feasibility, unknown clustering).

A uniform dense grid stands in for a hierarchical map: desk-scale grids fit
comfortably and an octree would be an optimization behind this same
interface. Single-writer: exactly one context integrates observations; reads
may run against `snapshot()` copies from anywhere.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .config import AgentBody, BeliefConfig, SensorConfig
from .geometry import (
    Aabb,
    Frustum,
    Obb,
    Pose,
    batch_ray_visited,
    batch_segment_visible,
    dbscan,
)
from .world import Observation, center_index_range

UNKNOWN, FREE, OCCUPIED = 0, 1, 2
_STATE_CHARS = {UNKNOWN: "?", FREE: ".", OCCUPIED: "#"}


@dataclass
class UnknownCluster:
    centroid: np.ndarray
    voxel_count: int
    volume: float  # voxel_count * voxel_size**3


@dataclass
class IntegrationSummary:
    freed: int = 0
    occupied: int = 0
    changed: int = 0
    bounds_min: np.ndarray | None = None  # voxel index bounds of state changes
    bounds_max: np.ndarray | None = None

    def merge(self, other: "IntegrationSummary") -> "IntegrationSummary":
        out = IntegrationSummary(
            freed=self.freed + other.freed,
            occupied=self.occupied + other.occupied,
            changed=self.changed + other.changed,
        )
        mins = [b for b in (self.bounds_min, other.bounds_min) if b is not None]
        maxs = [b for b in (self.bounds_max, other.bounds_max) if b is not None]
        if mins:
            out.bounds_min = np.min(mins, axis=0)
            out.bounds_max = np.max(maxs, axis=0)
        return out

    def changed_region(self, voxel_size: float) -> Aabb | None:
        if self.bounds_min is None:
            return None
        return Aabb(min=self.bounds_min * voxel_size,
                    max=(self.bounds_max + 1) * voxel_size)


def _ball_offsets(radius: float) -> np.ndarray:
    """Integer lattice offsets with Euclidean norm <= radius (inclusive)."""
    r = int(math.floor(radius + 1e-9))
    rng = np.arange(-r, r + 1)
    ii, jj, kk = np.meshgrid(rng, rng, rng, indexing="ij")
    offs = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    keep = (offs ** 2).sum(axis=1) <= radius * radius + 1e-9
    return offs[keep]


def lattice_dbscan(indices: np.ndarray, eps_voxels: float, min_pts: int) -> np.ndarray:
    """Exact DBSCAN over integer lattice points (voxel indices).

    Equivalent to dbscan() on the voxel centers with eps = eps_voxels *
    voxel_size: neighborhoods are inclusive Euclidean balls. Runs densely on
    the points' bounding subgrid (convolution for neighbor counts, ball
    dilations for core components), so it stays fast on the thousands of
    voxels an early map produces. Cluster ids follow lattice order of the
    first core voxel; border points join the lowest-labeled cluster in
    reach; noise is -1.
    """
    from scipy import ndimage

    n = indices.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels

    r = int(math.floor(eps_voxels + 1e-9))
    lo = indices.min(axis=0) - r
    hi = indices.max(axis=0) + r
    shape = tuple(hi - lo + 1)
    local = indices - lo
    grid = np.zeros(shape, dtype=bool)
    grid[local[:, 0], local[:, 1], local[:, 2]] = True

    offs = _ball_offsets(eps_voxels)
    k = 2 * r + 1
    kernel = np.zeros((k, k, k), dtype=np.int32)
    kernel[offs[:, 0] + r, offs[:, 1] + r, offs[:, 2] + r] = 1

    counts = ndimage.convolve(grid.astype(np.int32), kernel, mode="constant")
    core = grid & (counts >= min_pts)
    structure = kernel.astype(bool)

    comp = np.zeros(shape, dtype=np.int64)  # 0 = unassigned
    cluster = 0
    core_left = core.copy()
    while core_left.any():
        seed = np.unravel_index(np.argmax(core_left), shape)
        cluster += 1
        member = np.zeros(shape, dtype=bool)
        member[seed] = True
        while True:
            grown = ndimage.binary_dilation(member, structure=structure) & core
            if grown.sum() == member.sum():
                break
            member = grown
        comp[member] = cluster
        core_left &= ~member

    # border points: within the ball of some core point, lowest label wins
    for label in range(1, cluster + 1):
        reach = ndimage.binary_dilation(comp == label, structure=structure)
        border = grid & reach & (comp == 0) & ~core
        comp[border] = label

    labels = comp[local[:, 0], local[:, 1], local[:, 2]] - 1
    return labels


class _BeliefReads:
    """Read-side queries shared by the live belief and its snapshots.

    Requires: self.state (uint8 grid), self.vs, self.agent, self.cfg.
    """

    state: np.ndarray
    vs: float
    agent: AgentBody
    cfg: BeliefConfig

    @property
    def dims(self):
        return self.state.shape

    def occupied_mask(self) -> np.ndarray:
        return self.state == OCCUPIED

    def unknown_mask(self) -> np.ndarray:
        return self.state == UNKNOWN

    # -- information gain ---------------------------------------------------

    def _frustum_candidate_indices(self, frustum: Frustum) -> np.ndarray:
        """Indices of unknown voxels inside the frustum's bounding box."""
        f, r, u = frustum.pose.axes()
        corners = []
        for depth in (frustum.near, frustum.far):
            hw = depth * math.tan(frustum.hfov / 2)
            vw = depth * math.tan(frustum.vfov / 2)
            for sy in (-1, 1):
                for sz in (-1, 1):
                    corners.append(frustum.pose.position + depth * f + sy * hw * r + sz * vw * u)
        corners = np.array(corners)
        lo = corners.min(axis=0) - self.vs
        hi = corners.max(axis=0) + self.vs
        i0 = np.maximum(np.floor(lo / self.vs).astype(int), 0)
        i1 = np.minimum(np.floor(hi / self.vs).astype(int) + 1, self.dims)
        if np.any(i0 >= i1):
            return np.empty((0, 3), dtype=np.int64)
        sub = self.state[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] == UNKNOWN
        idx = np.argwhere(sub)
        return idx + i0

    def visible_unknown(self, frustum: Frustum) -> np.ndarray:
        """(M, 3) indices of unknown voxels that are inside the frustum and
        whose center ray from the camera is unoccluded."""
        cand = self._frustum_candidate_indices(frustum)
        if cand.shape[0] == 0:
            return cand
        centers = (cand + 0.5) * self.vs
        inside = frustum.contains_many(centers)
        cand = cand[inside]
        if cand.shape[0] == 0:
            return cand
        vis = batch_segment_visible(
            frustum.pose.position, (cand + 0.5) * self.vs,
            self.occupied_mask(), self.vs)
        return cand[vis]

    def info_gain(self, frustum: Frustum) -> int:
        """Number of unknown voxels visible inside the frustum: the voxel is
        unknown, its center is in the frustum, and the straight ray from the
        camera to the center crosses no occupied voxel first."""
        return int(self.visible_unknown(frustum).shape[0])

    def panoramic_gains(self, position, sensor: SensorConfig,
                        headings: int = 12, pitch: float = 0.0) -> list[int]:
        """info_gain at `headings` evenly spaced yaws, sharing one
        visibility pass (visibility is independent of yaw)."""
        pos = np.asarray(position, dtype=float).reshape(3)
        # superset of every heading's frustum: ball of the far-corner radius
        reach = sensor.far * math.sqrt(
            1.0 + math.tan(sensor.hfov / 2) ** 2 + math.tan(sensor.vfov / 2) ** 2)
        i0 = np.maximum(np.floor((pos - reach) / self.vs).astype(int), 0)
        i1 = np.minimum(np.floor((pos + reach) / self.vs).astype(int) + 1, self.dims)
        if np.any(i0 >= i1):
            return [0] * headings
        sub = self.state[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] == UNKNOWN
        cand = np.argwhere(sub) + i0
        if cand.shape[0] == 0:
            return [0] * headings
        centers = (cand + 0.5) * self.vs

        frusta = [
            Frustum(pose=Pose(pos, yaw=2 * math.pi * h / headings, pitch=pitch),
                    hfov=sensor.hfov, vfov=sensor.vfov,
                    near=sensor.near, far=sensor.far)
            for h in range(headings)
        ]
        inside = np.stack([f.contains_many(centers) for f in frusta], axis=0)
        any_inside = inside.any(axis=0)
        vis = np.zeros(cand.shape[0], dtype=bool)
        if any_inside.any():
            vis[any_inside] = batch_segment_visible(
                pos, centers[any_inside], self.occupied_mask(), self.vs)
        return [int(np.count_nonzero(inside[h] & vis)) for h in range(headings)]

    # -- traversability -----------------------------------------------------

    def check_support(self, position) -> bool:
        """Occupied fraction of the 2-voxel slab below the base footprint is
        at least the support threshold (inclusive). Out-of-grid lattice slots
        count against the ratio."""
        p = np.asarray(position, dtype=float).reshape(3)
        r = self.agent.radius
        i0, i1 = center_index_range(
            [p[0] - r, p[1] - r, p[2] - self.cfg.support_slab_voxels * self.vs],
            [p[0] + r, p[1] + r, p[2]],
            self.vs)
        total = int(np.prod(np.maximum(i1 - i0 + 1, 0)))
        if total == 0:
            return False
        lo = np.maximum(i0, 0)
        hi = np.minimum(i1, np.asarray(self.dims) - 1)
        if np.any(lo > hi):
            return False
        occ = int(np.count_nonzero(
            self.state[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] == OCCUPIED))
        return occ / total >= self.cfg.support_ratio

    def check_edge(self, p, q, occupied_only: bool = False) -> bool:
        """True when the swept volume from p to q contains no occupied and no
        unknown voxel center. Unknown space blocks edges (occupied_only=True
        relaxes this for the last-line step guard). Volume reaching outside
        the grid blocks as well.

        The swept volume is the agent cylinder translated along the planar
        segment, taken as an oriented box (axis = segment direction,
        cross-section = the cylinder's bounding square). Tested directly
        against voxel centers; kept allocation-light, it runs in every
        roadmap insertion and optimizer edge query.
        """
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        r, h = self.agent.radius, self.agent.height
        dx = float(q[0] - p[0])
        dy = float(q[1] - p[1])
        length = math.hypot(dx, dy)
        if length < 1e-12:
            ax, ay = 1.0, 0.0
        else:
            ax, ay = dx / length, dy / length
        hu = length / 2.0 + r      # half extent along the segment
        hv = r                     # lateral half extent
        cx = 0.5 * (p[0] + q[0])
        cy = 0.5 * (p[1] + q[1])
        z0 = float(p[2])
        z1 = z0 + h
        vs = self.vs
        nx, ny, nz = self.dims

        # world-aligned bounds of the rotated rectangle
        ex = hu * abs(ax) + hv * abs(ay)
        ey = hu * abs(ay) + hv * abs(ax)
        eps = 1e-12
        ix0 = math.ceil((cx - ex) / vs - 0.5 - eps)
        ix1 = math.floor((cx + ex) / vs - 0.5 + eps)
        iy0 = math.ceil((cy - ey) / vs - 0.5 - eps)
        iy1 = math.floor((cy + ey) / vs - 0.5 + eps)
        iz0 = math.ceil(z0 / vs - 0.5 - eps)
        iz1 = math.floor(z1 / vs - 0.5 + eps)
        if ix0 > ix1 or iy0 > iy1 or iz0 > iz1:
            return True

        xs = (np.arange(ix0, ix1 + 1) + 0.5) * vs - cx
        ys = (np.arange(iy0, iy1 + 1) + 0.5) * vs - cy
        u = xs[:, None] * ax + ys[None, :] * ay
        v = -xs[:, None] * ay + ys[None, :] * ax
        inside = (np.abs(u) <= hu + 1e-12) & (np.abs(v) <= hv + 1e-12)
        if not inside.any():
            return True

        if not occupied_only:
            # outside the mapped world counts as unknown; the box spans the
            # full z range at every inside cell, so out-of-grid z blocks
            out = iz0 < 0 or iz1 >= nz
            if not out and ix0 < 0:
                out = bool(inside[:-ix0].any())
            if not out and ix1 >= nx:
                out = bool(inside[nx - ix0:].any())
            if not out and iy0 < 0:
                out = bool(inside[:, :-iy0].any())
            if not out and iy1 >= ny:
                out = bool(inside[:, ny - iy0:].any())
            if out:
                return False

        gx0, gx1 = max(ix0, 0), min(ix1, nx - 1)
        gy0, gy1 = max(iy0, 0), min(iy1, ny - 1)
        gz0, gz1 = max(iz0, 0), min(iz1, nz - 1)
        if gx0 > gx1 or gy0 > gy1 or gz0 > gz1:
            return True
        sub = self.state[gx0:gx1 + 1, gy0:gy1 + 1, gz0:gz1 + 1]
        bad = (sub == OCCUPIED) if occupied_only else (sub != FREE)
        column_bad = bad.any(axis=2)
        clipped = inside[gx0 - ix0: gx1 - ix0 + 1, gy0 - iy0: gy1 - iy0 + 1]
        return not bool((column_bad & clipped).any())

    # -- unknown clustering ---------------------------------------------------

    def unknown_clusters(self, region: Aabb, eps: float, min_pts: int,
                         mask_indices: np.ndarray | None = None) -> list[UnknownCluster]:
        """DBSCAN over unknown-voxel centers inside `region` (or over an
        explicit (M, 3) index set); noise voxels are discarded.

        Voxel centers form a lattice, so the clustering runs on a fast exact
        lattice path (neighbor counts by offset shifts, components by
        union-find); border voxels join their lowest-labeled core cluster.
        """
        if mask_indices is None:
            i0, i1 = center_index_range(region.min, region.max, self.vs)
            i0 = np.maximum(i0, 0)
            i1 = np.minimum(i1, np.asarray(self.dims) - 1)
            if np.any(i0 > i1):
                return []
            sub = self.state[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1] == UNKNOWN
            idx = np.argwhere(sub) + i0
        else:
            idx = mask_indices
        if idx.shape[0] == 0:
            return []
        labels = lattice_dbscan(idx, eps / self.vs, min_pts)
        centers = (idx + 0.5) * self.vs
        clusters = []
        for label in range(labels.max() + 1 if labels.size else 0):
            members = centers[labels == label]
            if members.shape[0] == 0:
                continue
            clusters.append(UnknownCluster(
                centroid=members.mean(axis=0),
                voxel_count=int(members.shape[0]),
                volume=float(members.shape[0]) * self.vs ** 3))
        return clusters

    # -- debug dump -----------------------------------------------------------

    def dump_text(self) -> str:
        """Human-readable state dump: one character block per z slice,
        '?' unknown, '.' free, '#' occupied; row y printed top-down."""
        out = io.StringIO()
        nx, ny, nz = self.dims
        out.write(f"belief {nx}x{ny}x{nz} voxel={self.vs}\n")
        for k in range(nz):
            out.write(f"z={k}\n")
            for j in range(ny - 1, -1, -1):
                row = "".join(_STATE_CHARS[int(self.state[i, j, k])] for i in range(nx))
                out.write(row + "\n")
        return out.getvalue()


class BeliefSnapshot(_BeliefReads):
    """Immutable copy of the belief state for concurrent readers."""

    def __init__(self, state: np.ndarray, voxel_size: float,
                 agent: AgentBody, cfg: BeliefConfig, version: int):
        self.state = state
        self.state.setflags(write=False)
        self.vs = voxel_size
        self.agent = agent
        self.cfg = cfg
        self.version = version


class VoxelBelief(_BeliefReads):
    """Log-odds tri-state occupancy belief; all voxels start unknown."""

    def __init__(self, grid_dims, voxel_size: float,
                 agent: AgentBody | None = None,
                 cfg: BeliefConfig | None = None):
        self.cfg = cfg or BeliefConfig()
        if not (self.cfg.free_threshold < 0.0 < self.cfg.occupied_threshold):
            raise ValueError("thresholds must satisfy l_free < 0 < l_occ")
        self.vs = float(voxel_size)
        self.agent = agent or AgentBody()
        self.log_odds = np.zeros(tuple(grid_dims), dtype=np.float32)
        self.state = np.zeros(tuple(grid_dims), dtype=np.uint8)
        self.version = 0

    def _reclassify(self, idx: np.ndarray) -> IntegrationSummary:
        """Re-derive states at the given (M, 3) indices, returning a change
        summary with the affected bounds."""
        if idx.shape[0] == 0:
            return IntegrationSummary()
        lo = self.log_odds[idx[:, 0], idx[:, 1], idx[:, 2]]
        new = np.where(lo >= self.cfg.occupied_threshold, OCCUPIED,
                       np.where(lo <= self.cfg.free_threshold, FREE, UNKNOWN)).astype(np.uint8)
        old = self.state[idx[:, 0], idx[:, 1], idx[:, 2]]
        changed = new != old
        if not changed.any():
            return IntegrationSummary()
        self.state[idx[changed, 0], idx[changed, 1], idx[changed, 2]] = new[changed]
        ch_idx = idx[changed]
        return IntegrationSummary(
            freed=int(np.count_nonzero((new == FREE) & changed)),
            occupied=int(np.count_nonzero((new == OCCUPIED) & changed)),
            changed=int(np.count_nonzero(changed)),
            bounds_min=ch_idx.min(axis=0),
            bounds_max=ch_idx.max(axis=0))

    def integrate(self, obs: Observation, camera: Pose | None = None) -> IntegrationSummary:
        """Fold one observation into the belief.

        Each depth ray decrements every voxel it crosses strictly before its
        hit and increments the hit voxel; rays with no return carve free
        space out to the sensor range actually traced (NaN distance = no
        hit). Log-odds are clamped and states re-derived from thresholds.
        """
        cam = camera or obs.camera
        origin = cam.position
        dirs = obs.ray_dirs
        if dirs.shape[0] == 0:
            return IntegrationSummary()
        hits = obs.ray_hits
        has_hit = ~np.isnan(hits)
        # carve limit: the hit distance, or the sensor far plane for misses
        stops = np.where(has_hit, hits, obs.max_range)

        ray_ids, visited = batch_ray_visited(origin, dirs, stops, self.dims, self.vs)
        visited_flat = (
            np.ravel_multi_index((visited[:, 0], visited[:, 1], visited[:, 2]), self.dims)
            if visited.shape[0] else np.empty(0, dtype=np.int64))

        # per-ray hit voxel (just past the reported depth along the ray)
        hit_flat_per_ray = np.full(dirs.shape[0], -1, dtype=np.int64)
        hidx = np.empty((0, 3), dtype=np.int64)
        if has_hit.any():
            eps = 1e-6 * self.vs
            pts = origin + dirs[has_hit] * (hits[has_hit, None] + eps)
            cand = np.floor(pts / self.vs).astype(np.int64)
            dims = np.asarray(self.dims)
            ok = np.all((cand >= 0) & (cand < dims), axis=1)
            rows = np.where(has_hit)[0][ok]
            hidx = cand[ok]
            if hidx.shape[0]:
                hit_flat_per_ray[rows] = np.ravel_multi_index(
                    (hidx[:, 0], hidx[:, 1], hidx[:, 2]), self.dims)

        delta = np.zeros(self.state.size, dtype=np.float64)
        if visited_flat.size:
            # a ray never decrements its own hit voxel, even when the
            # reported depth lands inside it rather than on its entry face
            keep = visited_flat != hit_flat_per_ray[ray_ids]
            counts = np.bincount(visited_flat[keep], minlength=self.state.size)
            delta += counts * self.cfg.log_odds_miss

        touched = [visited]
        if hidx.shape[0]:
            counts = np.bincount(hit_flat_per_ray[hit_flat_per_ray >= 0],
                                 minlength=self.state.size)
            delta += counts * self.cfg.log_odds_hit
            touched.append(hidx)

        changed_flat = np.nonzero(delta)[0]
        if changed_flat.size == 0:
            return IntegrationSummary()
        lo_flat = self.log_odds.reshape(-1)
        lo_flat[changed_flat] = np.clip(
            lo_flat[changed_flat] + delta[changed_flat],
            -self.cfg.log_odds_clamp, self.cfg.log_odds_clamp)
        idx = np.stack(np.unravel_index(changed_flat, self.dims), axis=1)
        self.version += 1
        return self._reclassify(idx)

    def clear_body_volume(self, position) -> IntegrationSummary:
        """Proprioceptive evidence: the agent occupies its own cylinder, so
        that volume is free and the slab beneath its footprint is supported.
        Saturates log-odds directly (the agent is certain about its body)."""
        p = np.asarray(position, dtype=float).reshape(3)
        r, h = self.agent.radius, self.agent.height
        dims = np.asarray(self.dims)

        i0, i1 = center_index_range(p - [r, r, 0.0], p + [r, r, h], self.vs)
        i0 = np.maximum(i0, 0)
        i1 = np.minimum(i1, dims - 1)
        touched = []
        if np.all(i0 <= i1):
            axes = [np.arange(i0[a], i1[a] + 1) for a in range(3)]
            ii, jj, kk = np.meshgrid(*axes, indexing="ij")
            idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
            centers = (idx + 0.5) * self.vs
            inside = (np.linalg.norm(centers[:, :2] - p[:2], axis=1) <= r)
            idx = idx[inside]
            if idx.shape[0]:
                self.log_odds[idx[:, 0], idx[:, 1], idx[:, 2]] = -self.cfg.log_odds_clamp
                touched.append(idx)

        s0, s1 = center_index_range(
            [p[0] - r, p[1] - r, p[2] - self.cfg.support_slab_voxels * self.vs],
            [p[0] + r, p[1] + r, p[2]], self.vs)
        s0 = np.maximum(s0, 0)
        s1 = np.minimum(s1, dims - 1)
        if np.all(s0 <= s1):
            axes = [np.arange(s0[a], s1[a] + 1) for a in range(3)]
            ii, jj, kk = np.meshgrid(*axes, indexing="ij")
            idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
            if idx.shape[0]:
                self.log_odds[idx[:, 0], idx[:, 1], idx[:, 2]] = self.cfg.log_odds_clamp
                touched.append(idx)

        if not touched:
            return IntegrationSummary()
        self.version += 1
        return self._reclassify(np.concatenate(touched, axis=0))

    def reveal_from_truth(self, occupied: np.ndarray, region: Aabb | None = None) -> None:
        """Test/benchmark helper: saturate the belief to the true occupancy,
        optionally only inside a region box. Voxels outside stay unknown."""
        if region is None:
            sel = np.ones(self.dims, dtype=bool)
        else:
            sel = np.zeros(self.dims, dtype=bool)
            i0, i1 = center_index_range(region.min, region.max, self.vs)
            i0 = np.maximum(i0, 0)
            i1 = np.minimum(i1, np.asarray(self.dims) - 1)
            if np.any(i0 > i1):
                return
            sel[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1] = True
        self.log_odds[sel & occupied] = self.cfg.log_odds_clamp
        self.log_odds[sel & ~occupied] = -self.cfg.log_odds_clamp
        self.state[sel & occupied] = OCCUPIED
        self.state[sel & ~occupied] = FREE
        self.version += 1

    def snapshot(self) -> BeliefSnapshot:
        return BeliefSnapshot(self.state.copy(), self.vs, self.agent,
                              self.cfg, self.version)


__all__ = [
    "UNKNOWN", "FREE", "OCCUPIED", "BeliefSnapshot", "IntegrationSummary",
    "UnknownCluster", "VoxelBelief",
]
