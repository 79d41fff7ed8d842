"""Shared deterministic geometric and combinatorial primitives.

Everything here is a pure function over immutable inputs (arrays are never
mutated), so all operations are safe to call concurrently.

Conventions fixed once and relied on everywhere else:

- yaw is measured CCW about +z from the +x axis, normalized to (-pi, pi];
  pitch is positive looking up, limited to [-pi/2, pi/2].
- a voxel (i, j, k) spans the half-open cube [i*vs, (i+1)*vs) x ... with the
  grid origin at the world origin.
- a ray whose origin voxel already satisfies the query counts as an
  immediate hit (conservative for collision logic).
- frustum boundaries are inclusive: a point at exactly the half-FOV angle
  or exactly at the near/far plane is inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = (a + math.pi) % TWO_PI - math.pi
    if a == -math.pi:
        a = math.pi
    return a


@dataclass(frozen=True)
class Pose:
    """A camera/agent pose: 3D position plus yaw and pitch (roll is fixed 0).

    position is in meters; yaw normalized to (-pi, pi]; pitch clamped to
    [-pi/2, pi/2].
    """

    position: np.ndarray
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))
        object.__setattr__(
            self, "pitch", float(np.clip(self.pitch, -math.pi / 2, math.pi / 2))
        )

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (forward, right, up) unit vectors of the camera frame.

        right depends on yaw only, so the frame stays well defined at
        pitch +-pi/2.
        """
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cp * cy, cp * sy, sp])
        right = np.array([sy, -cy, 0.0])
        up = np.cross(right, forward)
        return forward, right, up


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.max - self.min))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def distance_to_point(self, p) -> float:
        p = np.asarray(p, dtype=float).reshape(3)
        d = np.maximum(np.maximum(self.min - p, p - self.max), 0.0)
        return float(np.linalg.norm(d))


@dataclass(frozen=True)
class Obb:
    """Oriented box: center, half-extents and an orthonormal rotation.

    Columns of `rotation` are the box axes; det(rotation) = +1.
    """

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        h = np.asarray(self.half_extents, dtype=float).reshape(3)
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.any(h < 0):
            raise ValueError("Obb half-extents must be >= 0")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("Obb rotation must be orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("Obb rotation must have determinant +1")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "rotation", r)

    def contains(self, points: np.ndarray, pad: float = 0.0) -> np.ndarray:
        """Inclusive membership test for an (N, 3) array of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        local = (pts - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents + pad, axis=1)


@dataclass(frozen=True)
class Frustum:
    """Perspective view frustum at a pose.

    hfov/vfov are full opening angles in radians; depth range [near, far].
    """

    pose: Pose
    hfov: float
    vfov: float
    near: float
    far: float

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError("Frustum requires 0 < near < far")
        if not (0.0 < self.hfov < math.pi and 0.0 < self.vfov < math.pi):
            raise ValueError("Frustum requires FOV angles in (0, pi)")

    def contains(self, p) -> bool:
        return bool(self.contains_many(np.asarray(p, dtype=float).reshape(1, 3))[0])

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized inclusive point-in-frustum test for (N, 3) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fwd, right, up = self.pose.axes()
        rel = pts - self.pose.position
        x = rel @ fwd
        y = rel @ right
        z = rel @ up
        eps = 1e-9
        ok = (x >= self.near - eps) & (x <= self.far + eps)
        # inclusive boundary: |lateral| <= x * tan(half fov)
        ok &= np.abs(y) <= x * math.tan(0.5 * self.hfov) + eps
        ok &= np.abs(z) <= x * math.tan(0.5 * self.vfov) + eps
        return ok


# ---------------------------------------------------------------------------
# ray casting over voxel grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridQuery:
    """A voxel-state query: boolean mask over a uniform grid.

    mask[i, j, k] is True where the queried state holds (typically
    "occupied"). The grid origin sits at the world origin.
    """

    mask: np.ndarray
    voxel_size: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape  # type: ignore[return-value]


def ray_cast(origin, direction, max_range: float, grid: GridQuery):
    """First voxel along a ray whose grid state matches the query.

    Returns the (i, j, k) tuple of the first matching voxel, or None when
    nothing matches within max_range. The origin voxel counts: if it already
    matches, it is returned immediately.

    Raises ValueError for a zero-norm direction or non-positive max_range.
    """
    o = np.asarray(origin, dtype=float).reshape(3)
    d = np.asarray(direction, dtype=float).reshape(3)
    n = float(np.linalg.norm(d))
    if n < 1e-12:
        raise ValueError("ray direction must have nonzero norm")
    if max_range <= 0:
        raise ValueError("max_range must be > 0")
    d = d / n

    hits, idx, _ = batch_ray_first_hit(o, d.reshape(1, 3), max_range, grid.mask, grid.voxel_size)
    if hits[0]:
        return (int(idx[0, 0]), int(idx[0, 1]), int(idx[0, 2]))
    return None


def _init_traversal(origin: np.ndarray, dirs: np.ndarray, vs: float):
    """Common Amanatides/Woo setup for a shared-origin ray bundle.

    Returns (voxel (N,3) int, t_max (N,3), t_delta (N,3), step (N,3) int).
    t values are measured in meters along each (unit or not) direction; the
    caller chooses the parameterization through `dirs` scaling.
    """
    n = dirs.shape[0]
    voxel = np.floor(origin / vs).astype(np.int64)
    voxel = np.broadcast_to(voxel, (n, 3)).copy()
    step = np.where(dirs > 0, 1, np.where(dirs < 0, -1, 0)).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(dirs != 0, vs / np.abs(dirs), np.inf)
        next_boundary = (voxel + (step > 0)) * vs
        t_max = np.where(dirs != 0, (next_boundary - origin) / dirs, np.inf)
    # origin exactly on a voxel face with a negative direction exits its
    # (upper, by floor convention) origin voxel at t = 0 exactly.
    t_max = np.maximum(t_max, 0.0)
    return voxel, t_max, t_delta, step


def batch_ray_first_hit(
    origin: np.ndarray,
    dirs: np.ndarray,
    max_range,
    mask: np.ndarray,
    vs: float,
):
    """First-hit cast for N unit-direction rays sharing one origin.

    max_range is a scalar or an (N,) array of per-ray limits. Returns
    (hit (N,) bool, index (N,3) int64, t_hit (N,) float) where t_hit is the
    entry distance of the hit voxel along the ray (0 for an origin-voxel
    hit). Rays leaving the grid are misses.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = dirs.shape[0]
    limits = np.broadcast_to(np.asarray(max_range, dtype=float), (n,)).copy()
    dims = np.asarray(mask.shape)

    voxel, t_max, t_delta, step = _init_traversal(origin, dirs, vs)
    hit = np.zeros(n, dtype=bool)
    hit_idx = np.full((n, 3), -1, dtype=np.int64)
    t_hit = np.full(n, np.inf)

    inside = np.all((voxel >= 0) & (voxel < dims), axis=1)
    t_entry = np.zeros(n)
    alive = np.arange(n)

    # origin voxel check
    live_inside = inside[alive]
    iv = voxel[alive[live_inside]]
    matched = mask[iv[:, 0], iv[:, 1], iv[:, 2]]
    hit_ids = alive[live_inside][matched]
    hit[hit_ids] = True
    hit_idx[hit_ids] = voxel[hit_ids]
    t_hit[hit_ids] = 0.0
    alive = alive[~hit[alive]]

    while alive.size:
        tm = t_max[alive]
        axis = np.argmin(tm, axis=1)
        t_next = tm[np.arange(alive.size), axis]
        still = t_next <= limits[alive]
        alive = alive[still]
        if not alive.size:
            break
        axis = axis[still]
        t_next = t_next[still]
        voxel[alive, axis] += step[alive, axis]
        t_max[alive, axis] += t_delta[alive, axis]
        t_entry[alive] = t_next

        v = voxel[alive]
        in_grid = np.all((v >= 0) & (v < dims), axis=1)
        # rays that left the grid can never return (grid is convex)
        alive = alive[in_grid]
        if not alive.size:
            break
        v = voxel[alive]
        matched = mask[v[:, 0], v[:, 1], v[:, 2]]
        hit_ids = alive[matched]
        hit[hit_ids] = True
        hit_idx[hit_ids] = voxel[hit_ids]
        t_hit[hit_ids] = t_entry[hit_ids]
        alive = alive[~matched]

    return hit, hit_idx, t_hit


def batch_segment_visible(
    origin: np.ndarray,
    targets: np.ndarray,
    blocked_mask: np.ndarray,
    vs: float,
) -> np.ndarray:
    """Visibility of N target points from one origin through a voxel grid.

    A target is visible when the straight segment origin->target crosses no
    voxel with blocked_mask True before entering the target's own voxel.
    Traversal is parameterized on t in [0, 1] along each segment, so no
    normalization error can make a ray miss its own target voxel.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    origin = np.asarray(origin, dtype=float).reshape(3)
    n = targets.shape[0]
    dims = np.asarray(blocked_mask.shape)
    seg = targets - origin
    target_voxel = np.floor(targets / vs).astype(np.int64)

    voxel, t_max, t_delta, step = _init_traversal(origin, seg, vs)
    visible = np.zeros(n, dtype=bool)

    at_target = np.all(voxel == target_voxel, axis=1)
    visible[at_target] = True  # origin inside the target voxel

    alive = np.where(~at_target)[0]
    if alive.size:
        origin_voxel = voxel[alive[0]]
        if np.all(origin_voxel >= 0) and np.all(origin_voxel < dims):
            if blocked_mask[origin_voxel[0], origin_voxel[1], origin_voxel[2]]:
                return visible  # everything (except own-voxel targets) blocked

    while alive.size:
        tm = t_max[alive]
        axis = np.argmin(tm, axis=1)
        voxel[alive, axis] += step[alive, axis]
        t_max[alive, axis] += t_delta[alive, axis]

        v = voxel[alive]
        reached = np.all(v == target_voxel[alive], axis=1)
        visible[alive[reached]] = True
        alive = alive[~reached]
        if not alive.size:
            break

        v = voxel[alive]
        in_grid = np.all((v >= 0) & (v < dims), axis=1)
        alive = alive[in_grid]
        if not alive.size:
            break
        v = voxel[alive]
        blocked = blocked_mask[v[:, 0], v[:, 1], v[:, 2]]
        alive = alive[~blocked]

    return visible


def batch_ray_visited(
    origin: np.ndarray,
    dirs: np.ndarray,
    stops,
    grid_dims,
    vs: float,
):
    """All voxels entered strictly before per-ray stop distances.

    Used for free-space carving: returns (ray_id, i, j, k) int64 arrays of
    every in-grid voxel whose entry distance along its ray is < stop. The
    origin voxel (entry 0) is included. The origin is assumed to lie inside
    the grid; once a ray exits the (convex) grid it is dropped.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = dirs.shape[0]
    stops = np.broadcast_to(np.asarray(stops, dtype=float), (n,)).copy()
    dims = np.asarray(grid_dims)

    voxel, t_max, t_delta, step = _init_traversal(origin, dirs, vs)
    out_ids = []
    out_idx = []

    alive = np.where(stops > 0)[0]
    ov = voxel[alive]
    in_grid = np.all((ov >= 0) & (ov < dims), axis=1)
    keep = alive[in_grid]
    out_ids.append(keep.copy())
    out_idx.append(voxel[keep].copy())

    while alive.size:
        tm = t_max[alive]
        axis = np.argmin(tm, axis=1)
        t_next = tm[np.arange(alive.size), axis]
        still = t_next < stops[alive]
        alive = alive[still]
        if not alive.size:
            break
        axis = axis[still]
        voxel[alive, axis] += step[alive, axis]
        t_max[alive, axis] += t_delta[alive, axis]

        v = voxel[alive]
        in_grid = np.all((v >= 0) & (v < dims), axis=1)
        # leaving the grid is final: drop those rays entirely
        alive = alive[in_grid]
        if not alive.size:
            break
        out_ids.append(alive.copy())
        out_idx.append(voxel[alive].copy())

    if not out_ids:
        return np.empty(0, dtype=np.int64), np.empty((0, 3), dtype=np.int64)
    return np.concatenate(out_ids), np.concatenate(out_idx, axis=0)


# ---------------------------------------------------------------------------
# geometric median
# ---------------------------------------------------------------------------

WEISZFELD_TOL = 1e-4
WEISZFELD_MAX_ITER = 50
_SINGULAR_EPS = 1e-9


def weiszfeld_median(points, tol: float = WEISZFELD_TOL, max_iter: int = WEISZFELD_MAX_ITER):
    """Geometric median of 2D points by Weiszfeld iteration.

    Stops when the iterate moves less than tol or after max_iter rounds.
    When the iterate lands on an input point, the standard optimality test
    decides whether that point is the median; if not, the iterate is nudged
    1e-6 m along the descent direction (plain Weiszfeld divides by zero
    there).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("weiszfeld_median requires at least one point")
    if pts.shape[0] == 1:
        return pts[0].copy()

    y = pts.mean(axis=0)
    for _ in range(max_iter):
        d = np.linalg.norm(pts - y, axis=1)
        singular = d < _SINGULAR_EPS
        if np.any(singular):
            m = int(np.count_nonzero(singular))
            rest = pts[~singular]
            if rest.shape[0] == 0:
                return y  # all points coincide
            g = ((y - rest) / np.linalg.norm(y - rest, axis=1)[:, None]).sum(axis=0)
            gn = float(np.linalg.norm(g))
            if gn <= m + 1e-12:
                return y  # anchor point is the median
            y = y - 1e-6 * (g / gn)
            continue
        w = 1.0 / d
        y_new = (pts * w[:, None]).sum(axis=0) / w.sum()
        if np.linalg.norm(y_new - y) < tol:
            return y_new
        y = y_new
    return y


# ---------------------------------------------------------------------------
# minimum spanning forest
# ---------------------------------------------------------------------------


class _UnionFind:
    __slots__ = ("parent", "rank")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, a: int) -> int:
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


@dataclass
class MstResult:
    """Kruskal output: chosen edges plus the connected components.

    components has one sorted node list per component; a single entry means
    the edge set spans everything. Disconnection is reported, not raised.
    """

    edges: list = field(default_factory=list)
    components: list = field(default_factory=list)
    total_weight: float = 0.0

    @property
    def connected(self) -> bool:
        return len(self.components) <= 1


def kruskal_mst(n_nodes: int, edges) -> MstResult:
    """Minimum spanning forest over nodes 0..n_nodes-1.

    edges is an iterable of (i, j, weight). Ties are broken by (weight, i, j)
    so the result is deterministic.
    """
    uf = _UnionFind(n_nodes)
    chosen = []
    total = 0.0
    for i, j, w in sorted(edges, key=lambda e: (e[2], e[0], e[1])):
        if i == j:
            continue
        if uf.union(i, j):
            chosen.append((i, j, w))
            total += w
    groups: dict[int, list[int]] = {}
    for v in range(n_nodes):
        groups.setdefault(uf.find(v), []).append(v)
    components = sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
    return MstResult(edges=chosen, components=components, total_weight=total)


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

DBSCAN_NOISE = -1


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Classic DBSCAN over N points of any fixed dimension.

    Returns an (N,) int array: cluster label >= 0 or -1 for noise.
    Neighborhoods are inclusive (distance <= eps). Determinism: points are
    processed in input order and cluster ids are assigned in first-core-point
    order; border points go to the first cluster that reaches them.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    labels = np.full(n, -2, dtype=np.int64)  # -2 = unvisited
    if n == 0:
        return labels

    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, eps)
    neighborhoods = [sorted(nb) for nb in neighborhoods]

    cluster = 0
    for idx in range(n):
        if labels[idx] != -2:
            continue
        nb = neighborhoods[idx]
        if len(nb) < min_pts:
            labels[idx] = DBSCAN_NOISE
            continue
        labels[idx] = cluster
        queue = [j for j in nb if j != idx]
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == DBSCAN_NOISE:
                labels[j] = cluster  # border point
            if labels[j] != -2:
                continue
            labels[j] = cluster
            nb_j = neighborhoods[j]
            if len(nb_j) >= min_pts:
                queue.extend(k for k in nb_j if labels[k] == -2 or labels[k] == DBSCAN_NOISE)
        cluster += 1
    return labels


# ---------------------------------------------------------------------------
# box overlap ratios
# ---------------------------------------------------------------------------


def _intersection_volume(a: Aabb, b: Aabb) -> float:
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    ext = hi - lo
    if np.any(ext <= 0):
        return 0.0
    return float(np.prod(ext))


def iou3(a: Aabb, b: Aabb) -> float:
    """3D intersection over union; degenerate zero-volume boxes give 0."""
    inter = _intersection_volume(a, b)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return inter / union


def ios3(a: Aabb, b: Aabb) -> float:
    """3D intersection over the smaller box; zero-volume boxes give 0."""
    smaller = min(a.volume, b.volume)
    if smaller <= 0:
        return 0.0
    return _intersection_volume(a, b) / smaller


# ---------------------------------------------------------------------------
# PCA-fitted oriented bounding box
# ---------------------------------------------------------------------------


def pca_obb(points) -> Obb:
    """Fit an oriented box with axes = covariance eigenvectors.

    Axes are ordered by descending eigenvalue; the frame is flipped to
    det +1 if needed; extents are tight over the input points.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("pca_obb requires at least one point")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / max(1, pts.shape[0])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    rot = vecs[:, order]
    if np.linalg.det(rot) < 0:
        rot = rot.copy()
        rot[:, 2] = -rot[:, 2]
    local = centered @ rot
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    half = 0.5 * (hi - lo)
    center = mean + rot @ (0.5 * (hi + lo))
    return Obb(center=center, half_extents=half, rotation=rot)
