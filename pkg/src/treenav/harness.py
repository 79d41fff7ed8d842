"""Episode orchestration and benchmarking: the full perception-planning loop
against the synthetic world, SR/SPL metrics, and seeded suites with ablation
variants (full, no-deliberation, no-steiner).

The loop per action step: sense, integrate (plus proprioceptive clearing of
the agent's own volume), vote; every epoch_stride steps the reactive layer
reroots and grows the roadmap, revalidates changed regions, admits and
re-evaluates viewpoints, refreshes entities, and rebuilds the decision
tree; the deliberative layer runs only when a re-invocation trigger fires.
"""

from __future__ import annotations

import hashlib
import heapq
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backends import MockBackend
from .belief import IntegrationSummary, VoxelBelief
from .config import Config
from .decision import (
    TERMINAL,
    DecisionTree,
    TreeSnapshot,
    ViewpointManager,
    extract_subtree,
    optimize_with_baseline,
)
from .geometry import Pose
from .narration import annotate_tree, assemble, caption_all
from .policy import (
    NO_COMMITMENT,
    Commitment,
    FollowController,
    decide,
    fallback_target,
    should_invoke,
    target_detected,
)
from .roadmap import RoadmapTree
from .scenarios import generate
from .semantics import SemanticMap
from .world import Action, Scenario, World, judge

VARIANTS = ("full", "no-deliberation", "no-steiner")


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    path_length: float
    optimal_length: float
    spl: float
    collisions: int
    triggers: list = field(default_factory=list)     # (step, reason)
    decisions: list = field(default_factory=list)    # dicts: scores, selected
    epoch_log: list = field(default_factory=list)    # per-epoch tree stats
    timings: dict = field(default_factory=dict)      # stage -> seconds
    narration_latencies: list = field(default_factory=list)
    caption_bytes: list = field(default_factory=list)
    final_position: tuple = (0.0, 0.0, 0.0)
    variant: str = "full"
    seed: int = 0

    def content_dict(self) -> dict:
        """Everything except wall-clock timings, rounded for stability."""
        return {
            "success": self.success,
            "steps": self.steps,
            "path_length": round(self.path_length, 9),
            "optimal_length": (round(self.optimal_length, 9)
                               if math.isfinite(self.optimal_length) else "inf"),
            "spl": round(self.spl, 9),
            "collisions": self.collisions,
            "triggers": self.triggers,
            "decisions": self.decisions,
            "epoch_log": self.epoch_log,
            "caption_bytes": self.caption_bytes,
            "final_position": [round(x, 9) for x in self.final_position],
            "variant": self.variant,
            "seed": self.seed,
        }

    def content_hash(self) -> str:
        payload = json.dumps(self.content_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class SuiteReport:
    variant: str
    family: str
    sr: float                 # percent
    spl: float                # percent (mean spl * 100)
    rows: list = field(default_factory=list)
    config_hash: str = ""
    seeds: list = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("seed,success,steps,path_length,optimal_length,spl,"
                  "collisions,decisions,mean_narration_ms,caption_bytes\n")
        for r in self.rows:
            lat = (1000 * np.mean(r.narration_latencies)
                   if r.narration_latencies else 0.0)
            out.write(
                f"{r.seed},{int(r.success)},{r.steps},{r.path_length:.3f},"
                f"{r.optimal_length if math.isfinite(r.optimal_length) else 'inf'},"
                f"{r.spl:.4f},{r.collisions},{len(r.decisions)},"
                f"{lat:.2f},{sum(r.caption_bytes)}\n")
        return out.getvalue()

    def table(self) -> str:
        return (f"variant={self.variant} family={self.family} "
                f"n={len(self.rows)} SR={self.sr:.1f}% SPL={self.spl:.1f}% "
                f"config={self.config_hash}")


def spl_value(success: bool, path: float, optimal: float) -> float:
    """Success weighted by path length: l*/max(p, l*) on success, else 0."""
    if not success:
        return 0.0
    if not math.isfinite(optimal):
        return 0.0
    if optimal <= 0:
        return 1.0
    return optimal / max(path, optimal)


def optimal_path_length(scenario: Scenario) -> float:
    """Shortest 8-connected grid path (diagonal cost sqrt(2)) from the start
    to any pose within the success radius of a target box, honoring the
    agent's clearance and support against ground truth."""
    from .world import TruthQueries

    occ = scenario.occupancy()
    truth = TruthQueries(occ, scenario.voxel_size, scenario.agent)
    vs = scenario.voxel_size
    nx, ny = occ.shape[0], occ.shape[1]
    base_z = float(scenario.start.position[2])

    passable = np.zeros((nx, ny), dtype=bool)
    for i in range(nx):
        for j in range(ny):
            center = np.array([(i + 0.5) * vs, (j + 0.5) * vs, base_z])
            passable[i, j] = truth.position_ok(center)

    boxes = scenario.target_boxes()
    goal = np.zeros((nx, ny), dtype=bool)
    for i in range(nx):
        for j in range(ny):
            if not passable[i, j]:
                continue
            p = np.array([(i + 0.5) * vs, (j + 0.5) * vs, base_z])
            if min(b.distance_to_point(p) for b in boxes) <= scenario.success_radius:
                goal[i, j] = True

    start = (int(scenario.start.position[0] / vs), int(scenario.start.position[1] / vs))
    if not passable[start]:
        return math.inf
    if goal[start]:
        return 0.0

    dist = {start: 0.0}
    heap = [(0.0, start)]
    moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)),
             (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2))]
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if d > dist.get((i, j), math.inf):
            continue
        if goal[i, j]:
            return d * vs
        for di, dj, w in moves:
            ni, nj = i + di, j + dj
            if not (0 <= ni < nx and 0 <= nj < ny) or not passable[ni, nj]:
                continue
            nd = d + w
            if nd < dist.get((ni, nj), math.inf):
                dist[(ni, nj)] = nd
                heapq.heappush(heap, (nd, (ni, nj)))
    return math.inf


class _Stopwatch:
    def __init__(self, sink: dict):
        self.sink = sink

    def __call__(self, stage: str):
        sw = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                sw.sink[stage] = sw.sink.get(stage, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def run_episode(scenario: Scenario, config: Config | None = None,
                seed: int = 0, variant: str = "full",
                backend=None, summarizer=None,
                collect_states: bool = False) -> EpisodeResult:
    """Run one episode to STOP or budget exhaustion.

    variant: "full" deliberates through the backend; "no-deliberation"
    always navigates to the nearest informative viewpoint; "no-steiner"
    feeds the raw warm-start tree to narration and the policy.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    config = config or Config()
    backend = backend or MockBackend(config.policy)

    world = World(scenario, config.sensor, run_seed=seed)
    belief = VoxelBelief(scenario.grid_dims, scenario.voxel_size,
                         agent=scenario.agent, cfg=config.belief)
    smap = SemanticMap(scenario.voxel_size, config.semantic)
    base_z = float(scenario.start.position[2])
    start_xy = scenario.start.position[:2].copy()
    roadmap = RoadmapTree(start_xy, base_z, config.roadmap)
    vpman = ViewpointManager(config.sensor, scenario.agent.camera_height,
                             config.viewpoints)
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed & 0x7FFFFFFF, scenario.seed & 0x7FFFFFFF, 0x5EED]))

    timings: dict[str, float] = {}
    watch = _Stopwatch(timings)
    result = EpisodeResult(success=False, steps=0, path_length=0.0,
                           optimal_length=optimal_path_length(scenario),
                           spl=0.0, collisions=0, variant=variant, seed=seed)

    belief.clear_body_volume(world.agent_pose.position)
    pending = IntegrationSummary()
    bootstrap = ([Action.LOOK_DOWN] + [Action.TURN_LEFT] * 12 + [Action.LOOK_UP]
                 if config.harness.bootstrap_sweep else [])

    commitment: Commitment | None = None
    follower: FollowController | None = None
    snapshot: TreeSnapshot | None = None
    goal_entity = None
    epoch = 0
    force_epoch = False
    states = [] if collect_states else None
    exploration_exhausted = False

    def rebuild_tree() -> TreeSnapshot:
        rm_snap = roadmap.snapshot()
        terminals = [(vp.vp_id, vp.roadmap_node) for vp in vpman.live()
                     if vp.roadmap_node in rm_snap.positions]
        with watch("optimize"):
            warm = extract_subtree(rm_snap, terminals)
            if variant == "no-steiner":
                tree, warm_cost, iters, degraded = warm, warm.total_cost, 0, False
            else:
                edge_free = lambda p, q: belief.check_edge(
                    roadmap.pos3(p), roadmap.pos3(q))
                point_free = lambda p: (belief.check_support(roadmap.pos3(p))
                                        and belief.check_edge(roadmap.pos3(p),
                                                              roadmap.pos3(p)))
                rrt_pos = np.array([rm_snap.positions[i]
                                    for i in sorted(rm_snap.positions)])
                tree, info = optimize_with_baseline(
                    warm, edge_free, point_free, rrt_pos, config.steiner)
                warm_cost, iters, degraded = info.warm_cost, info.iterations, info.degraded
        result.epoch_log.append({
            "epoch": epoch, "step": world.steps_taken,
            "terminals": len(terminals),
            "warm_cost": round(warm.total_cost, 6),
            "tree_cost": round(tree.total_cost, 6),
            "nodes": tree.n,
        })
        return TreeSnapshot(tree=tree, epoch=epoch, warm_cost=warm_cost,
                            iterations=iters, degraded=degraded)

    def path_for_vp(snap: TreeSnapshot, vp_id: int):
        idx = snap.tree.index_of_vp(vp_id)
        if idx is None:
            return None, None
        path = snap.tree.path_to(idx)
        xy = snap.tree.positions[path]
        vp_waypoints = {k for k, node in enumerate(path)
                        if snap.tree.tags[node] == TERMINAL}
        return path, (xy, vp_waypoints)

    def make_follower(xy, vp_waypoints):
        return FollowController(xy, vp_waypoints, base_z, config.sensor,
                                config.policy, peek=(variant != "no-deliberation"),
                                camera_height=scenario.agent.camera_height)

    while world.active:
        with watch("sense"):
            obs = world.sense()
        with watch("integrate"):
            pending = pending.merge(belief.integrate(obs))
            pending = pending.merge(
                belief.clear_body_volume(world.agent_pose.position))
        with watch("vote"):
            smap.vote(obs, belief)

        in_bootstrap = bool(bootstrap)
        epoch_due = (not in_bootstrap
                     and (force_epoch
                          or world.steps_taken % config.harness.epoch_stride == 0))
        if epoch_due:
            force_epoch = False
            epoch += 1
            agent_xy = world.agent_pose.position[:2]
            with watch("roadmap"):
                roadmap.reroot(agent_xy, belief)
                region = pending.changed_region(scenario.voxel_size)
                if region is not None:
                    roadmap.revalidate(region, belief)
                inserted = []
                for _ in range(config.roadmap.samples_per_epoch):
                    cand = roadmap.sample_candidate(agent_xy, belief, rng)
                    if roadmap.has_node_within(cand, config.roadmap.min_spacing):
                        continue  # density guard, keeps the tree bounded
                    nid, _reason = roadmap.insert(cand, belief)
                    if nid is not None:
                        inserted.append(nid)
            with watch("viewpoints"):
                for nid in inserted:
                    vpman.admit(nid, roadmap.nodes[nid].position, base_z, belief)
                vpman.reevaluate(belief, changed_region=region)
            with watch("semantic"):
                entities = smap.refresh(epoch)
            pending = IntegrationSummary()

            snapshot = rebuild_tree()
            if collect_states:
                states.append((epoch, roadmap.snapshot(), snapshot))

            ent = target_detected(entities, scenario.target_category,
                                  smap.provider,
                                  config.semantic.sim_merge_threshold)
            if ent is not None:
                goal_entity = ent
                rm_snap = roadmap.snapshot()
                target_xy = ent.bbox.center[:2]
                best = min(rm_snap.positions.items(),
                           key=lambda kv: (np.hypot(kv[1][0] - target_xy[0],
                                                    kv[1][1] - target_xy[1]), kv[0]))
                path_ids = rm_snap.path_to(best[0])
                xy = np.array([rm_snap.positions[i] for i in path_ids])
                follower = make_follower(xy, set())
                commitment = None
            else:
                goal_entity = None
                agent_at_root = bool(np.linalg.norm(
                    snapshot.tree.positions[snapshot.tree.root_index]
                    - world.agent_pose.position[:2]) <= config.policy.waypoint_radius)
                if variant == "no-deliberation":
                    if follower is None or follower.finished or follower.blocked \
                            or commitment is None \
                            or should_invoke(snapshot, commitment, agent_at_root):
                        vp_id = fallback_target(snapshot, vpman.live())
                        if vp_id is None:
                            exploration_exhausted = True
                        else:
                            path, built = path_for_vp(snapshot, vp_id)
                            if built is not None:
                                follower = make_follower(*built)
                                commitment = Commitment.for_path(
                                    snapshot.tree, path, vp_id, epoch)
                else:
                    trigger = should_invoke(snapshot, commitment, agent_at_root)
                    if trigger is None and follower is not None \
                            and (follower.finished or follower.blocked):
                        trigger = NO_COMMITMENT
                        commitment = None
                    if trigger is not None:
                        result.triggers.append((world.steps_taken, trigger))
                        options = snapshot.root_subtrees()
                        if not options:
                            vp_id = None
                            exploration_exhausted = True
                        else:
                            with watch("narration"):
                                t0 = time.perf_counter()
                                anns = annotate_tree(
                                    snapshot.tree, belief, entities,
                                    config.sensor, base_z,
                                    scenario.agent.camera_height,
                                    config.narration, config.semantic,
                                    parallel=config.harness.parallel_narration)
                                narratives = assemble(snapshot.tree, anns)
                                captions = caption_all(narratives, summarizer)
                                result.narration_latencies.append(
                                    time.perf_counter() - t0)
                                result.caption_bytes.append(
                                    sum(len(c.text.encode()) for c in captions))
                            with watch("decide"):
                                sel, sheet = decide(scenario.target_category,
                                                    captions, backend)
                            result.decisions.append({
                                "step": world.steps_taken,
                                "scores": list(sheet.scores),
                                "abstained": sheet.abstained,
                                "selected": sel,
                            })
                            if sel is None:
                                vp_id = fallback_target(snapshot, vpman.live())
                            else:
                                subtree_nodes = narratives[sel].root_child
                                members = dict(options)[subtree_nodes]
                                depth = snapshot.tree.depth_from_root()
                                vp_nodes = [i for i in members
                                            if snapshot.tree.tags[i] == TERMINAL
                                            and snapshot.tree.vp_ids[i] is not None]
                                vp_id = None
                                if vp_nodes:
                                    nearest = min(vp_nodes,
                                                  key=lambda i: (depth[i],
                                                                 snapshot.tree.vp_ids[i]))
                                    vp_id = snapshot.tree.vp_ids[nearest]
                            if vp_id is None:
                                vp_id = fallback_target(snapshot, vpman.live())
                            if vp_id is None:
                                exploration_exhausted = True
                            else:
                                path, built = path_for_vp(snapshot, vp_id)
                                if built is not None:
                                    follower = make_follower(*built)
                                    commitment = Commitment.for_path(
                                        snapshot.tree, path, vp_id, epoch)
                    elif commitment is not None:
                        # refresh the follower against the rebuilt tree
                        path, built = path_for_vp(snapshot, commitment.target_vp)
                        if built is not None:
                            follower = make_follower(*built)

        # ---- act ------------------------------------------------------
        action = None
        if goal_entity is not None:
            d = goal_entity.bbox.distance_to_point(world.agent_pose.position)
            if d <= 0.9 * scenario.success_radius:
                action = Action.STOP
        if action is None and bootstrap:
            action = bootstrap.pop(0)
        if action is None and follower is not None:
            with watch("follow"):
                action = follower.next_action(world.agent_pose, belief)
            if action is None:
                force_epoch = True
                if follower.finished and commitment is not None:
                    # the committed viewpoint has been stood on and swept;
                    # its pose is exhausted regardless of residual gain
                    vpman.retire([commitment.target_vp])
                    commitment = None
                if follower.finished and goal_entity is not None:
                    # path exhausted next to the goal: stop if within reach
                    d = goal_entity.bbox.distance_to_point(world.agent_pose.position)
                    if d <= scenario.success_radius * 0.95:
                        action = Action.STOP
        if action is None:
            if exploration_exhausted:
                action = Action.STOP
            else:
                # nothing to do yet (no tree/commitment): hold an epoch early
                force_epoch = True
                action = Action.TURN_LEFT

        before = world.agent_pose.position.copy()
        pose, collided, stopped = world.step(action)
        result.path_length += float(np.linalg.norm(pose.position - before))
        if collided:
            result.collisions += 1
            # feed the blocked cell back as occupied evidence
            ahead = before + np.array([math.cos(pose.yaw), math.sin(pose.yaw), 0.0]) * 0.3
            idx = np.floor(ahead / scenario.voxel_size).astype(int)
            dims = np.asarray(belief.dims)
            for dz in range(1, 4):
                cell = np.array([idx[0], idx[1], idx[2] + dz - 1])
                if np.all(cell >= 0) and np.all(cell < dims):
                    belief.log_odds[cell[0], cell[1], cell[2]] = belief.cfg.log_odds_clamp
                    belief.state[cell[0], cell[1], cell[2]] = 2
            force_epoch = True
            if follower is not None:
                follower.blocked = True
        if stopped:
            break

    result.steps = world.steps_taken
    result.success = judge(world.agent_pose, world.stop_called, scenario)
    result.spl = spl_value(result.success, result.path_length,
                           result.optimal_length)
    result.final_position = tuple(float(x) for x in world.agent_pose.position)
    result.timings = timings
    if collect_states:
        result.states = states  # type: ignore[attr-defined]
    return result


def run_suite(family: str, n: int, config: Config | None = None,
              variants=("full",), base_seed: int = 0,
              backend=None) -> dict[str, SuiteReport]:
    """Run n seeded episodes per variant over one scenario family."""
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or Config()
    reports: dict[str, SuiteReport] = {}
    seeds = [base_seed + i for i in range(n)]
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        rows = []
        for s in seeds:
            scenario = generate(family, s)
            rows.append(run_episode(scenario, config, seed=s, variant=variant,
                                    backend=backend))
        sr = 100.0 * sum(r.success for r in rows) / len(rows)
        spl = 100.0 * float(np.mean([r.spl for r in rows]))
        reports[variant] = SuiteReport(
            variant=variant, family=family, sr=sr, spl=spl, rows=rows,
            config_hash=config.content_hash(), seeds=seeds)
    return reports
