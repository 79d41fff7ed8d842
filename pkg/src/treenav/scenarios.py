"""Deterministic scenario generators: corridor-with-side-rooms, random maze,
semantic-cue rooms, and a branch-free long corridor.

All families build on a 0.2 m voxel lattice sized for desk-scale runs. Every
generated scenario passes full validation (start pose free and supported,
target entity present and reachable by construction).
"""

from __future__ import annotations

import math

import numpy as np

from .config import AgentBody
from .world import GroundTruthEntity, Scenario, validate_scenario

VS = 0.2           # generator voxel size, m
WALL_H = 8         # wall/grid height in voxels (1.6 m)
FLOOR_K = 1        # first airspace layer; floor occupies k=0

# per-category footprint (w, d, h) in meters and synonym pools
CATALOG = {
    "bed": ((1.2, 0.8, 0.4), ["bed", "double bed"]),
    "wardrobe": ((0.8, 0.4, 1.2), ["wardrobe", "closet"]),
    "nightstand": ((0.4, 0.4, 0.4), ["nightstand", "bedside table"]),
    "sofa": ((1.2, 0.6, 0.6), ["sofa", "couch"]),
    "tv": ((0.8, 0.2, 0.6), ["tv", "television"]),
    "coffee table": ((0.8, 0.4, 0.4), ["coffee table", "low table"]),
    "toilet": ((0.4, 0.6, 0.4), ["toilet", "lavatory"]),
    "bathtub": ((1.2, 0.6, 0.4), ["bathtub", "tub"]),
    "sink": ((0.4, 0.4, 0.6), ["sink", "washbasin"]),
    "refrigerator": ((0.6, 0.6, 1.2), ["refrigerator", "fridge"]),
    "oven": ((0.6, 0.6, 0.8), ["oven", "stove"]),
    "cup": ((0.2, 0.2, 0.2), ["cup", "mug"]),
    "dining table": ((1.2, 0.8, 0.4), ["dining table", "dinner table"]),
    "chair": ((0.4, 0.4, 0.6), ["chair", "dining chair"]),
    "toolbox": ((0.6, 0.4, 0.4), ["toolbox", "tool chest"]),
    "bicycle": ((1.2, 0.2, 0.8), ["bicycle", "bike"]),
}

ARCHETYPE_SETS = {
    "bedroom": ["bed", "wardrobe", "nightstand"],
    "living room": ["sofa", "tv", "coffee table"],
    "bathroom": ["toilet", "bathtub", "sink"],
    "kitchen": ["refrigerator", "oven", "cup"],
    "dining area": ["dining table", "chair"],
    "garage": ["toolbox", "bicycle"],
}

# the category a seeker would be sent after, per archetype
ARCHETYPE_TARGETS = {
    "bedroom": "bed",
    "living room": "sofa",
    "bathroom": "toilet",
    "kitchen": "refrigerator",
    "dining area": "dining table",
    "garage": "bicycle",
}


class _Builder:
    def __init__(self, dims_m, name: str, seed: int):
        self.dims = (int(round(dims_m[0] / VS)),
                     int(round(dims_m[1] / VS)),
                     WALL_H)
        self.name = name
        self.seed = seed
        self.solids: list[dict] = []
        self.entities: list[GroundTruthEntity] = []
        self._next_id = 0

    def box_m(self, lo_m, hi_m):
        """Add an occupied box given world-space meter bounds."""
        lo = [int(round(v / VS)) for v in lo_m]
        hi = [int(round(v / VS)) for v in hi_m]
        lo = [max(0, min(lo[i], self.dims[i])) for i in range(3)]
        hi = [max(0, min(hi[i], self.dims[i])) for i in range(3)]
        if all(hi[i] > lo[i] for i in range(3)):
            self.solids.append({"kind": "box", "min": lo, "max": hi})

    def floor(self):
        self.box_m((0, 0, 0), (self.dims[0] * VS, self.dims[1] * VS, VS))

    def perimeter(self):
        X, Y = self.dims[0] * VS, self.dims[1] * VS
        H = WALL_H * VS
        self.box_m((0, 0, VS), (VS, Y, H))
        self.box_m((X - VS, 0, VS), (X, Y, H))
        self.box_m((0, 0, VS), (X, VS, H))
        self.box_m((0, Y - VS, VS), (X, Y, H))

    def wall_x(self, x0, x1, y, gaps=()):
        """Wall segment along x at depth y, with door gaps [(gx0, gx1), ...]."""
        spans = [(x0, x1)]
        for g0, g1 in sorted(gaps):
            nxt = []
            for s0, s1 in spans:
                if g1 <= s0 or g0 >= s1:
                    nxt.append((s0, s1))
                else:
                    if s0 < g0:
                        nxt.append((s0, g0))
                    if g1 < s1:
                        nxt.append((g1, s1))
            spans = nxt
        for s0, s1 in spans:
            self.box_m((s0, y, VS), (s1, y + VS, WALL_H * VS))

    def wall_y(self, y0, y1, x, gaps=()):
        spans = [(y0, y1)]
        for g0, g1 in sorted(gaps):
            nxt = []
            for s0, s1 in spans:
                if g1 <= s0 or g0 >= s1:
                    nxt.append((s0, s1))
                else:
                    if s0 < g0:
                        nxt.append((s0, g0))
                    if g1 < s1:
                        nxt.append((g1, s1))
            spans = nxt
        for s0, s1 in spans:
            self.box_m((x, s0, VS), (x + VS, s1, WALL_H * VS))

    def entity(self, category: str, anchor_m, caption: str | None = None) -> int:
        """Place one catalog entity with its min corner at anchor (x, y) on
        the floor; returns its gt_id."""
        (w, d, h), synonyms = CATALOG[category]
        lo = [int(round(anchor_m[0] / VS)), int(round(anchor_m[1] / VS)), FLOOR_K]
        hi = [lo[0] + int(round(w / VS)), lo[1] + int(round(d / VS)),
              FLOOR_K + int(round(h / VS))]
        self.solids.append({"kind": "box", "min": lo, "max": hi})
        gid = self._next_id
        self._next_id += 1
        self.entities.append(GroundTruthEntity(
            gt_id=gid, category=category,
            caption=caption or f"a {category}",
            box_min=np.array(lo), box_max=np.array(hi),
            synonyms=list(synonyms)))
        return gid

    def build(self, start_xy, yaw, target_category, step_budget, name=None,
              success_radius=1.0) -> Scenario:
        s = Scenario(
            voxel_size=VS,
            grid_dims=self.dims,
            start=_pose(start_xy, yaw),
            target_category=target_category,
            entities=self.entities,
            solids=self.solids,
            step_budget=step_budget,
            success_radius=success_radius,
            seed=self.seed,
            agent=AgentBody(),
            name=name or self.name,
        )
        validate_scenario(s)
        return s


def _pose(xy, yaw):
    from .geometry import Pose
    return Pose(np.array([xy[0], xy[1], FLOOR_K * VS]), yaw=yaw, pitch=0.0)


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------


def corridor_with_side_rooms(seed: int = 0) -> Scenario:
    """A 10 m corridor with 4 side rooms; the target sits in the last room.

    Room order and in-room placement jitter are seeded; the layout counts
    (one corridor, 4 rooms) are fixed by construction.
    """
    rng = np.random.default_rng(seed)
    hall_w = 1.6
    room = 3.0
    X = 12.0
    Y = room + hall_w + room + 3 * VS
    b = _Builder((X, Y), "corridor", seed)
    b.floor()
    b.perimeter()

    y_hall0 = VS + room + VS
    y_hall1 = y_hall0 + hall_w
    # rooms: two on each side at x slots, doors 1.0 m wide onto the corridor
    slots = [1.4, 5.0]
    rooms = []
    for si, x0 in enumerate(slots):
        x1 = x0 + room
        for side in (0, 1):  # 0 = below hall, 1 = above
            door = (x0 + 1.0, x0 + 2.0)
            if side == 0:
                b.wall_x(x0 - VS, x1 + VS, y_hall0 - VS, gaps=[door])
                b.wall_y(VS, y_hall0 - VS, x0 - VS)
                b.wall_y(VS, y_hall0 - VS, x1)
                rooms.append(((x0, VS), (x1, y_hall0 - VS), door, side))
            else:
                b.wall_x(x0 - VS, x1 + VS, y_hall1, gaps=[door])
                b.wall_y(y_hall1 + VS, Y - VS, x0 - VS)
                b.wall_y(y_hall1 + VS, Y - VS, x1)
                rooms.append(((x0, y_hall1 + VS), (x1, Y - VS), door, side))

    order = rng.permutation(4)
    target_room = rooms[order[0]] if rooms[order[0]][0][0] > 4.0 else rooms[order[1]]
    if target_room[0][0] <= 4.0:
        target_room = next(r for r in rooms if r[0][0] > 4.0)

    target_cat = ["bed", "sofa", "toilet"][int(rng.integers(3))]
    (rx0, ry0), (rx1, ry1), _, side = target_room
    # against the wall away from the door
    ey = ry0 + 0.2 if side == 1 else ry1 - 0.2 - CATALOG[target_cat][0][1]
    ex = rx0 + 0.4 + float(rng.uniform(0.0, 0.8))
    b.entity(target_cat, (ex, ey))

    # one decoy entity in a different room
    decoy_room = next(r for r in rooms if r is not target_room)
    (dx0, dy0), (dx1, dy1), _, dside = decoy_room
    dcat = ["coffee table", "chair", "nightstand"][int(rng.integers(3))]
    dy = dy0 + 0.2 if dside == 1 else dy1 - 0.2 - CATALOG[dcat][0][1]
    b.entity(dcat, (dx0 + 0.6, dy))

    start = (1.0, 0.5 * (y_hall0 + y_hall1))
    return b.build(start, 0.0, target_cat, step_budget=500,
                   name=f"corridor-{seed}")


def long_corridor(seed: int = 0) -> Scenario:
    """A single straight corridor with no branches; the target stands at the
    far end. Used to exercise deliberation economy."""
    hall_w = 1.6
    X = 12.0
    Y = hall_w + 2 * VS
    b = _Builder((X, Y), "long-corridor", seed)
    b.floor()
    b.perimeter()
    b.entity("sofa", (X - VS - 1.3, VS + 0.3))
    start = (0.8, Y / 2.0)
    return b.build(start, 0.0, "sofa", step_budget=400,
                   name=f"long-corridor-{seed}")


def random_maze(seed: int = 0) -> Scenario:
    """Recursive-backtracker maze on 1.2 m cells with the target in the cell
    farthest from the start."""
    rng = np.random.default_rng(seed)
    cols, row_n = 6, 4
    cell = 1.6
    X = cols * cell + VS * (cols + 1)
    Y = row_n * cell + VS * (row_n + 1)
    b = _Builder((X, Y), "maze", seed)
    b.floor()
    b.perimeter()

    # carve a spanning tree over the cell lattice
    visited = np.zeros((cols, row_n), dtype=bool)
    stack = [(0, 0)]
    visited[0, 0] = True
    open_walls = set()
    while stack:
        cx, cy = stack[-1]
        nbrs = [(cx + dx, cy + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= cx + dx < cols and 0 <= cy + dy < row_n
                and not visited[cx + dx, cy + dy]]
        if not nbrs:
            stack.pop()
            continue
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        open_walls.add(((cx, cy), nxt))
        open_walls.add((nxt, (cx, cy)))
        visited[nxt] = True
        stack.append(nxt)

    def cell_lo(cx, cy):
        return (VS + cx * (cell + VS), VS + cy * (cell + VS))

    # interior walls with door gaps where the maze is open
    for cx in range(cols - 1):
        for cy in range(row_n):
            lo = cell_lo(cx, cy)
            x_wall = lo[0] + cell
            gaps = []
            if ((cx, cy), (cx + 1, cy)) in open_walls:
                gaps = [(lo[1] + 0.2, lo[1] + cell - 0.2)]
            b.wall_y(lo[1], lo[1] + cell, x_wall, gaps=gaps)
    for cx in range(cols):
        for cy in range(row_n - 1):
            lo = cell_lo(cx, cy)
            y_wall = lo[1] + cell
            gaps = []
            if ((cx, cy), (cx, cy + 1)) in open_walls:
                gaps = [(lo[0] + 0.2, lo[0] + cell - 0.2)]
            b.wall_x(lo[0], lo[0] + cell, y_wall, gaps=gaps)

    # BFS distance over cells to place the target far away
    from collections import deque

    dist = {(0, 0): 0}
    dq = deque([(0, 0)])
    while dq:
        cur = dq.popleft()
        for dxy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (cur[0] + dxy[0], cur[1] + dxy[1])
            if (cur, nxt) in open_walls and nxt not in dist:
                dist[nxt] = dist[cur] + 1
                dq.append(nxt)
    far = max(dist, key=lambda c: (dist[c], c))
    lo = cell_lo(*far)
    target_cat = ["toolbox", "chair", "nightstand"][int(rng.integers(3))]
    b.entity(target_cat, (lo[0] + 0.5, lo[1] + 1.0))

    start_lo = cell_lo(0, 0)
    start = (start_lo[0] + cell / 2, start_lo[1] + cell / 2)
    return b.build(start, 0.0, target_cat, step_budget=500,
                   name=f"maze-{seed}")


def semantic_cue_rooms(seed: int = 0) -> Scenario:
    """Hallway with 4 archetype rooms; the target room is one of the two far
    rooms, so semantic cues (not proximity) identify the right branch."""
    rng = np.random.default_rng(seed)
    hall_w = 1.6
    room = 3.0
    X = 11.0
    Y = room + hall_w + room + 3 * VS
    b = _Builder((X, Y), "semantic", seed)
    b.floor()
    b.perimeter()

    y_hall0 = VS + room + VS
    y_hall1 = y_hall0 + hall_w
    slots = [1.2, 6.4]
    rooms = []
    for x0 in slots:
        x1 = x0 + room
        for side in (0, 1):
            door = (x0 + 1.0, x0 + 2.0)
            if side == 0:
                b.wall_x(x0 - VS, x1 + VS, y_hall0 - VS, gaps=[door])
                b.wall_y(VS, y_hall0 - VS, x0 - VS)
                b.wall_y(VS, y_hall0 - VS, x1)
                rooms.append({"lo": (x0, VS), "hi": (x1, y_hall0 - VS),
                              "side": side, "far": x0 > 4.0})
            else:
                b.wall_x(x0 - VS, x1 + VS, y_hall1, gaps=[door])
                b.wall_y(y_hall1 + VS, Y - VS, x0 - VS)
                b.wall_y(y_hall1 + VS, Y - VS, x1)
                rooms.append({"lo": (x0, y_hall1 + VS), "hi": (x1, Y - VS),
                              "side": side, "far": x0 > 4.0})

    far_rooms = [r for r in rooms if r["far"]]
    near_rooms = [r for r in rooms if not r["far"]]
    target_room = far_rooms[int(rng.integers(len(far_rooms)))]
    target_arch = list(ARCHETYPE_SETS)[int(rng.integers(len(ARCHETYPE_SETS)))]
    target_cat = ARCHETYPE_TARGETS[target_arch]

    other_archs = [a for a in ARCHETYPE_SETS if a != target_arch]
    perm = rng.permutation(len(other_archs))
    assignments = []
    rest = [r for r in rooms if r is not target_room]
    for i, r in enumerate(rest):
        assignments.append((r, other_archs[int(perm[i % len(perm)])]))
    assignments.append((target_room, target_arch))

    for r, arch in assignments:
        cats = ARCHETYPE_SETS[arch]
        (rx0, ry0), (rx1, ry1) = r["lo"], r["hi"]
        # furniture along the wall opposite the door, spaced left to right
        wall_y = ry0 + 0.2 if r["side"] == 1 else None
        x_cursor = rx0 + 0.3
        for cat in cats:
            (w, d, h), _ = CATALOG[cat]
            if x_cursor + w > rx1 - 0.3:
                break
            ey = ry0 + 0.2 if r["side"] == 1 else ry1 - 0.2 - d
            b.entity(cat, (x_cursor, ey))
            x_cursor += w + 0.3

    start = (0.8, 0.5 * (y_hall0 + y_hall1))
    return b.build(start, 0.0, target_cat, step_budget=300,
                   name=f"semantic-{seed}")


FAMILIES = {
    "corridor": corridor_with_side_rooms,
    "long-corridor": long_corridor,
    "maze": random_maze,
    "semantic-cues": semantic_cue_rooms,
}


def generate(family: str, seed: int = 0) -> Scenario:
    try:
        fn = FAMILIES[family]
    except KeyError:
        raise ValueError(
            f"unknown scenario family {family!r}; choose from {sorted(FAMILIES)}")
    return fn(seed)
