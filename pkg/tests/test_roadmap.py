import math

import numpy as np
import pytest

from treenav.belief import FREE, OCCUPIED, UNKNOWN, VoxelBelief
from treenav.config import RoadmapConfig
from treenav.geometry import Aabb
from treenav.roadmap import NO_FEASIBLE_EDGE, NO_SUPPORT, RoadmapTree

VS = 0.2
BASE_Z = VS


def open_belief(dims=(50, 50, 8)):
    """Fully revealed open room: floor occupied, interior free."""
    b = VoxelBelief(dims, VS)
    occ = np.zeros(dims, dtype=bool)
    occ[:, :, 0] = True
    b.reveal_from_truth(occ)
    return b


def audit(tree, belief=None):
    """Structural invariants: single root, acyclic, connected, exact costs,
    and (optionally) every stored edge feasible against the belief."""
    roots = [n for n in tree.nodes.values() if n.parent is None]
    assert len(roots) == 1 and roots[0].node_id == tree.root_id
    seen = set()
    stack = [tree.root_id]
    while stack:
        nid = stack.pop()
        assert nid not in seen, "cycle detected"
        seen.add(nid)
        node = tree.nodes[nid]
        for cid in node.children:
            child = tree.nodes[cid]
            assert child.parent == nid
            expect = node.cost_to_root + np.linalg.norm(child.position - node.position)
            assert abs(child.cost_to_root - expect) < 1e-9
            stack.append(cid)
    assert seen == set(tree.nodes), "disconnected nodes"
    if belief is not None:
        for node in tree.nodes.values():
            if node.parent is None:
                continue
            parent = tree.nodes[node.parent]
            assert belief.check_edge(tree.pos3(node.position), tree.pos3(parent.position))


# ------------------------------------------------------------- sampling


def test_sparse_vicinity_samples_locally():
    b = open_belief()
    tree = RoadmapTree([5.0, 5.0], BASE_Z)
    rng = np.random.default_rng(0)
    for _ in range(50):
        xy = tree.sample_candidate([5.0, 5.0], b, rng)
        assert np.linalg.norm(xy - [5.0, 5.0]) <= tree.cfg.local_radius + 1e-9


def test_dense_vicinity_goes_global_reproducibly():
    b = open_belief()
    cfg = RoadmapConfig(local_density=3)
    tree = RoadmapTree([5.0, 5.0], BASE_Z, cfg)
    for dx in (0.3, -0.3, 0.0, 0.6):
        tree.insert([5.0 + dx, 5.0 + 0.4], b)

    def draw(seed):
        rng = np.random.default_rng(seed)
        return [tree.sample_candidate([5.0, 5.0], b, rng) for _ in range(20)]

    a, bb = draw(5), draw(5)
    assert np.allclose(a, bb)
    spread = np.array(a)
    assert spread.max() > 8.0 or spread.min() < 2.0  # left the local disc


def test_samples_clipped_to_map_bounds():
    b = open_belief()
    tree = RoadmapTree([0.3, 0.3], BASE_Z)
    rng = np.random.default_rng(1)
    extent = np.asarray(b.dims[:2]) * VS
    for _ in range(100):
        xy = tree.sample_candidate([0.3, 0.3], b, rng)
        assert np.all(xy >= 0.0) and np.all(xy <= extent + 1e-12)


# ------------------------------------------------------------- insert


def test_insert_over_pit_rejected():
    b = open_belief()
    b.state[20:30, 20:30, 0] = FREE  # no floor there
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    nid, reason = tree.insert([5.0, 5.0], b)
    assert nid is None and reason == NO_SUPPORT


def test_insert_without_reachable_neighbor_rejected():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    nid, reason = tree.insert([8.0, 8.0], b)  # far beyond neighbor radius
    assert nid is None and reason == NO_FEASIBLE_EDGE


def test_insert_picks_lowest_cost_parent():
    b = open_belief()
    cfg = RoadmapConfig(neighbor_radius=2.0)
    tree = RoadmapTree([2.0, 2.0], BASE_Z, cfg)
    # node a: cost 3.0 via a detour chain; node b: cost 2.0
    a1, _ = tree.insert([3.5, 2.0], b)
    a2, _ = tree.insert([3.5, 3.5], b)
    b1, _ = tree.insert([2.0, 4.0], b)
    na, nb = tree.nodes[a2], tree.nodes[b1]
    # candidate equidistant-ish: parent must minimize cost + edge length
    cand = [2.0 + 1.2, 4.0 + 0.0]
    cand_id, _ = tree.insert(cand, b)
    node = tree.nodes[cand_id]
    best = min(
        ((tree.nodes[n].cost_to_root + np.linalg.norm(tree.nodes[n].position - cand), n)
         for n in tree.neighbors_within(cand, cfg.neighbor_radius) if n != cand_id),
        key=lambda t: t,
    )
    assert node.parent == best[1]
    assert node.cost_to_root == pytest.approx(best[0])
    audit(tree, b)


def test_insert_shortcut_rewires_detour():
    b = open_belief()
    cfg = RoadmapConfig(neighbor_radius=1.5)
    tree = RoadmapTree([2.0, 2.0], BASE_Z, cfg)
    # L-shaped detour to (3.0, 3.4)
    n1, _ = tree.insert([3.4, 2.0], b)
    n2, _ = tree.insert([3.4, 3.4], b)
    assert n2 is not None
    detoured = tree.nodes[n2]
    cost_before = detoured.cost_to_root
    # shortcut node between root and the detoured node
    mid, _ = tree.insert([2.7, 2.7], b)
    assert mid is not None
    assert detoured.parent == mid
    assert detoured.cost_to_root < cost_before - 1e-9
    audit(tree, b)


def test_rewiring_never_increases_costs():
    b = open_belief()
    rng = np.random.default_rng(3)
    tree = RoadmapTree([5.0, 5.0], BASE_Z)
    for _ in range(300):
        xy = tree.sample_candidate([5.0, 5.0], b, rng)
        before = {i: n.cost_to_root for i, n in tree.nodes.items()}
        nid, _ = tree.insert(xy, b)
        for i, c in tree.nodes.items():
            if i in before and i != nid:
                assert c.cost_to_root <= before[i] + 1e-9
    audit(tree, b)


# ------------------------------------------------------------- reroot


def test_reroot_to_current_root_is_noop():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    tree.insert([2.8, 2.0], b)
    before = tree.snapshot()
    tree.reroot([2.0, 2.0], b)
    after = tree.snapshot()
    assert before == after


def test_reroot_to_leaf_reverses_chain_and_preserves_nodes():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    ids = [tree.root_id]
    for x in (2.8, 3.6, 4.4, 5.2):
        nid, _ = tree.insert([x, 2.0], b)
        ids.append(nid)
    n_before = len(tree)
    new_root = tree.reroot([5.2, 2.0], b)
    assert new_root == ids[-1]
    assert len(tree) == n_before
    audit(tree, b)
    # the old root is now reachable downward from the new root
    path = tree.shortest_path(ids[0])
    assert path[0] == new_root and path[-1] == ids[0]


def test_reroot_inserts_agent_node_when_far():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    tree.insert([2.8, 2.0], b)
    n_before = len(tree)
    tree.reroot([2.5, 2.4], b)  # 0.47 m from the nearest node > epsilon
    assert len(tree) == n_before + 1
    audit(tree, b)


def test_reroot_random_trees_structurally_sound():
    b = open_belief()
    rng = np.random.default_rng(11)
    tree = RoadmapTree([5.0, 5.0], BASE_Z)
    for _ in range(150):
        tree.insert(tree.sample_candidate([5.0, 5.0], b, rng), b)
    for _ in range(12):
        target = sorted(tree.nodes)[int(rng.integers(len(tree.nodes)))]
        tree.reroot(tree.nodes[target].position, b)
        audit(tree, b)


# ------------------------------------------------------------- paths


def test_path_to_root_is_single_node():
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    assert tree.shortest_path(tree.root_id) == [tree.root_id]


def test_chain_path_length():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    a, _ = tree.insert([3.0, 2.0], b)
    c, _ = tree.insert([4.0, 2.0], b)
    assert tree.shortest_path(c) == [tree.root_id, a, c]
    assert tree.nodes[c].cost_to_root == pytest.approx(2.0)


def test_unknown_id_raises():
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    with pytest.raises(KeyError):
        tree.shortest_path(99)


# ------------------------------------------------------------- revalidate


def test_revalidate_empty_region_no_report():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    tree.insert([2.8, 2.0], b)
    report = tree.revalidate(Aabb(min=[8.0, 8.0, 0.0], max=[9.0, 9.0, 1.6]), b)
    assert report.removed == [] and report.reattached == []


def test_revalidate_reattaches_around_new_wall():
    b = open_belief()
    cfg = RoadmapConfig(neighbor_radius=1.6)
    tree = RoadmapTree([2.0, 2.0], BASE_Z, cfg)
    left, _ = tree.insert([3.2, 2.0], b)
    right, _ = tree.insert([3.2, 3.2], b)   # child of left
    alt, _ = tree.insert([2.0, 3.2], b)     # alternative route from root
    assert tree.nodes[right].parent == left
    # a wall appears cutting the left->right edge
    wall = np.zeros(b.dims, dtype=bool)
    wall[14:18, 13, 1:6] = True
    b.log_odds[wall] = b.cfg.log_odds_clamp
    b.state[wall] = OCCUPIED
    region = Aabb(min=[14 * VS, 13 * VS, VS], max=[18 * VS, 14 * VS, 6 * VS])
    report = tree.revalidate(region, b)
    assert (right, alt) in report.reattached
    assert right in tree.nodes
    audit(tree, b)


def test_revalidate_removes_isolated_subtree():
    b = open_belief()
    cfg = RoadmapConfig(neighbor_radius=1.2)
    tree = RoadmapTree([2.0, 2.0], BASE_Z, cfg)
    mid, _ = tree.insert([3.0, 2.0], b)
    far, _ = tree.insert([4.0, 2.0], b)
    leaf, _ = tree.insert([5.0, 2.0], b)
    # wall isolates everything past x = 2.6 in a narrow cul-de-sac
    wall = np.zeros(b.dims, dtype=bool)
    wall[13:15, :, 1:6] = True
    b.log_odds[wall] = b.cfg.log_odds_clamp
    b.state[wall] = OCCUPIED
    region = Aabb(min=[13 * VS, 0.0, VS], max=[15 * VS, 10.0, 6 * VS])
    report = tree.revalidate(region, b)
    assert set(report.removed) == {mid, far, leaf}
    assert set(tree.nodes) == {tree.root_id}
    audit(tree)


# ------------------------------------------------------------- snapshot


def test_snapshot_is_isolated_and_exportable():
    b = open_belief()
    tree = RoadmapTree([2.0, 2.0], BASE_Z)
    tree.insert([2.8, 2.0], b)
    snap = tree.snapshot()
    tree.insert([2.0, 2.8], b)
    assert len(snap.positions) == 2
    text = snap.export_text()
    assert '"root": 0' in text
    assert snap.path_to(1)[0] == snap.root_id
