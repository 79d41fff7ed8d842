import numpy as np
import pytest

from treenav.belief import OCCUPIED, VoxelBelief
from treenav.config import SemanticConfig
from treenav.geometry import Aabb, Pose
from treenav.semantics import (
    Entity,
    HashedNgramEmbedding,
    SemanticMap,
    VoxelVotes,
    extract_entities,
    merge,
    track,
)
from treenav.world import Detection, Observation

VS = 0.1


def obs_with(detections):
    return Observation(ray_dirs=np.empty((0, 3)), ray_hits=np.empty(0),
                       detections=detections, camera=Pose(np.zeros(3)),
                       max_range=5.0)


def det(label, conf, voxels, gt_id=0):
    return Detection(label=label, confidence=conf,
                     mask_voxels=np.asarray(voxels, dtype=np.int64), gt_id=gt_id)


def belief_with_occupied(voxels, dims=(30, 30, 10)):
    b = VoxelBelief(dims, VS)
    for v in voxels:
        b.log_odds[tuple(v)] = b.cfg.log_odds_clamp
        b.state[tuple(v)] = OCCUPIED
    return b


def block(x0, y0, z0, nx, ny, nz):
    return [(x0 + i, y0 + j, z0 + k) for i in range(nx) for j in range(ny) for k in range(nz)]


# ------------------------------------------------------------------ votes


def test_single_detection_scores():
    voxels = block(2, 2, 1, 5, 2, 1)
    b = belief_with_occupied(voxels)
    votes = VoxelVotes()
    votes.vote(obs_with([det("cup", 0.9, voxels)]), b)
    labels = votes.argmax_labels()
    for v in voxels:
        assert labels[v] == "cup"
        assert votes.scores[v]["cup"] == pytest.approx(0.9)


def test_vote_argmax_prefers_higher_score():
    voxels = block(2, 2, 1, 3, 1, 1)
    b = belief_with_occupied(voxels)
    votes = VoxelVotes()
    votes.vote(obs_with([det("cup", 0.9, voxels)]), b)
    votes.vote(obs_with([det("teacup", 0.5, voxels)]), b)
    labels = votes.argmax_labels()
    assert all(labels[v] == "cup" for v in voxels)


def test_vote_skips_voxels_not_occupied_in_belief():
    voxels = block(2, 2, 1, 3, 1, 1)
    b = belief_with_occupied(voxels[:-1])  # last voxel is not occupied
    votes = VoxelVotes()
    cast = votes.vote(obs_with([det("cup", 0.9, voxels)]), b)
    assert cast == len(voxels) - 1
    assert tuple(voxels[-1]) not in votes.scores


def test_vote_order_commutes():
    voxels = block(1, 1, 1, 4, 2, 1)
    b = belief_with_occupied(voxels)
    seq = [det("cup", 0.6, voxels), det("mug", 0.3, voxels), det("cup", 0.2, voxels)]
    v1 = VoxelVotes()
    for d in seq:
        v1.vote(obs_with([d]), b)
    v2 = VoxelVotes()
    for d in reversed(seq):
        v2.vote(obs_with([d]), b)
    assert v1.argmax_labels() == v2.argmax_labels()


def test_vote_tie_breaks_lexicographically():
    voxels = block(1, 1, 1, 2, 1, 1)
    b = belief_with_occupied(voxels)
    votes = VoxelVotes()
    votes.vote(obs_with([det("zebra print rug", 0.5, voxels)]), b)
    votes.vote(obs_with([det("area rug", 0.5, voxels)]), b)
    assert all(lbl == "area rug" for lbl in votes.argmax_labels().values())


# ------------------------------------------------------------------ extract


def votes_from(label_voxels: dict):
    votes = VoxelVotes()
    for label, voxels in label_voxels.items():
        for v in voxels:
            cell = votes.scores.setdefault(tuple(v), {})
            cell[label] = cell.get(label, 0.0) + 1.0
    return votes


def test_extract_suppresses_floaters():
    body = block(2, 2, 1, 5, 5, 2)
    floater = [(25, 25, 5)]
    votes = votes_from({"sofa": body + floater})
    clusters = extract_entities(votes, VS, eps=3 * VS, min_pts=3)
    assert len(clusters) == 1
    assert clusters[0].voxels.shape[0] == len(body)


def test_extract_empty_votes():
    assert extract_entities(VoxelVotes(), VS, eps=0.3, min_pts=3) == []


def test_extract_labels_cluster_independently():
    a = block(2, 2, 1, 4, 4, 1)
    bvox = block(4, 4, 1, 4, 4, 1)  # interleaved in space with a
    votes = votes_from({"cup": a, "sofa": bvox})
    # overlapping voxels voted twice -> argmax ties to "cup"; give sofa more
    for v in bvox:
        votes.scores[tuple(v)]["sofa"] = 2.0
    clusters = extract_entities(votes, VS, eps=3 * VS, min_pts=3)
    labels = sorted(c.label for c in clusters)
    assert labels == ["cup", "sofa"]


def test_extract_respects_min_pts():
    votes = votes_from({"cup": block(1, 1, 1, 2, 1, 1)})  # 2 voxels < min_pts
    assert extract_entities(votes, VS, eps=3 * VS, min_pts=3) == []


# ------------------------------------------------------------------ track


def make_cluster(label, voxels):
    from treenav.semantics import RawCluster, _sorted_rows, _voxel_bbox
    v = np.asarray(voxels, dtype=np.int64)
    return RawCluster(label=label, voxels=_sorted_rows(v), bbox=_voxel_bbox(v, VS))


def make_entity(eid, label, voxels, last_seen=0):
    from treenav.semantics import _sorted_rows, _voxel_bbox
    v = np.asarray(voxels, dtype=np.int64)
    provider = HashedNgramEmbedding()
    return Entity(entity_id=eid, label=label, caption=f"a {label}",
                  bbox=_voxel_bbox(v, VS), member_voxels=_sorted_rows(v),
                  embedding=provider.embed(label), last_seen=last_seen)


def test_track_identical_cluster_keeps_id():
    provider = HashedNgramEmbedding()
    prev = [make_entity(7, "sofa", block(2, 2, 1, 5, 3, 2))]
    cl = [make_cluster("sofa", block(2, 2, 1, 5, 3, 2))]
    out, nid = track(prev, cl, 0.5, epoch=1, retire_after=20, next_id=8,
                     provider=provider)
    assert [e.entity_id for e in out] == [7]
    assert nid == 8


def test_track_low_iou_gets_fresh_id():
    provider = HashedNgramEmbedding()
    prev = [make_entity(0, "sofa", block(0, 0, 1, 10, 10, 1))]
    # overlap 40 of 100 voxels in x-y: IoU = 40/160 = 0.25 < 0.5
    cl = [make_cluster("sofa", block(6, 0, 1, 10, 10, 1))]
    out, nid = track(prev, cl, 0.5, epoch=1, retire_after=20, next_id=1,
                     provider=provider)
    ids = sorted(e.entity_id for e in out)
    assert ids == [0, 1]
    assert nid == 2


def test_track_greedy_prefers_higher_iou():
    provider = HashedNgramEmbedding()
    prev = [make_entity(3, "sofa", block(0, 0, 1, 10, 4, 1))]
    almost = make_cluster("sofa", block(0, 0, 1, 9, 4, 1))   # IoU 0.9
    partial = make_cluster("sofa", block(0, 0, 1, 6, 4, 1))  # IoU 0.6
    out, _ = track(prev, [partial, almost], 0.5, epoch=1, retire_after=20,
                   next_id=4, provider=provider)
    by_id = {e.entity_id: e for e in out}
    assert by_id[3].member_voxels.shape[0] == 9 * 4
    assert 4 in by_id  # the lower-overlap cluster became a new entity


def test_track_retires_after_k_epochs():
    provider = HashedNgramEmbedding()
    prev = [make_entity(0, "sofa", block(0, 0, 1, 4, 4, 1), last_seen=0)]
    out, _ = track(prev, [], 0.5, epoch=20, retire_after=20, next_id=1,
                   provider=provider)
    assert len(out) == 1  # still carried at exactly K epochs unseen
    out, _ = track(prev, [], 0.5, epoch=21, retire_after=20, next_id=1,
                   provider=provider)
    assert out == []


def test_track_ids_stay_unique():
    provider = HashedNgramEmbedding()
    prev = [make_entity(0, "sofa", block(0, 0, 1, 4, 4, 1)),
            make_entity(1, "cup", block(10, 10, 1, 3, 3, 1))]
    cl = [make_cluster("sofa", block(0, 0, 1, 4, 4, 1)),
          make_cluster("cup", block(20, 20, 1, 3, 3, 1))]
    out, _ = track(prev, cl, 0.5, epoch=1, retire_after=20, next_id=2,
                   provider=provider)
    ids = [e.entity_id for e in out]
    assert len(ids) == len(set(ids))


# ------------------------------------------------------------------ merge


def test_merge_synonym_overlap():
    provider = HashedNgramEmbedding()
    big = make_entity(0, "ceramic cup", block(2, 2, 1, 4, 4, 2))
    small = make_entity(1, "blue cup", block(2, 2, 1, 3, 3, 2))
    out = merge([big, small], provider, tau_ios=0.3, tau_sim=0.8, voxel_size=VS)
    assert len(out) == 1
    assert out[0].entity_id == 0
    assert out[0].label == "ceramic cup"
    assert out[0].member_voxels.shape[0] == 4 * 4 * 2


def test_merge_semantic_gate_blocks():
    provider = HashedNgramEmbedding()
    a = make_entity(0, "cup", block(2, 2, 1, 4, 4, 2))
    b = make_entity(1, "sofa", block(2, 2, 1, 3, 3, 2))
    out = merge([a, b], provider, tau_ios=0.3, tau_sim=0.8, voxel_size=VS)
    assert len(out) == 2


def test_merge_spatial_gate_blocks():
    provider = HashedNgramEmbedding()
    a = make_entity(0, "cup", block(2, 2, 1, 3, 3, 1))
    b = make_entity(1, "mug", block(20, 20, 1, 3, 3, 1))
    out = merge([a, b], provider, tau_ios=0.3, tau_sim=0.8, voxel_size=VS)
    assert len(out) == 2


def test_merge_idempotent_and_preserves_voxels():
    provider = HashedNgramEmbedding()
    ents = [
        make_entity(0, "ceramic cup", block(2, 2, 1, 4, 4, 2)),
        make_entity(1, "blue cup", block(3, 3, 1, 3, 3, 2)),
        make_entity(2, "teacup", block(2, 3, 1, 3, 3, 2)),
        make_entity(3, "sofa", block(12, 12, 1, 5, 3, 2)),
    ]
    union_before = {tuple(v) for e in ents for v in e.member_voxels}
    once = merge(ents, provider, 0.3, 0.8, VS)
    twice = merge(once, provider, 0.3, 0.8, VS)
    assert len(once) <= len(ents)
    assert [e.entity_id for e in once] == [e.entity_id for e in twice]
    union_after = {tuple(v) for e in once for v in e.member_voxels}
    assert union_after == union_before


# ------------------------------------------------------------------ embed


def test_fixture_pair_similarity():
    provider = HashedNgramEmbedding()
    assert provider.similarity("blue cup", "ceramic cup") == pytest.approx(0.92)
    assert provider.similarity("ceramic cup", "blue cup") == pytest.approx(0.92)


def test_self_similarity_is_one():
    provider = HashedNgramEmbedding()
    assert provider.similarity("anything at all", "anything at all") == 1.0
    v = provider.embed("anything at all")
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_ngram_fallback_ordering():
    provider = HashedNgramEmbedding()
    assert provider.similarity("cup", "teacup") > provider.similarity("cup", "sofa")


def test_embed_deterministic():
    p1 = HashedNgramEmbedding()
    p2 = HashedNgramEmbedding()
    assert np.allclose(p1.embed("washing machine"), p2.embed("washing machine"))


# ------------------------------------------------------------------ pipeline


def test_semantic_map_converges_on_synonym_scenario():
    # the classic mislabeled-cup sequence: one physical cup detected under
    # three different labels over ten frames must end as exactly one entity
    voxels = block(5, 5, 1, 3, 3, 2)
    b = belief_with_occupied(voxels)
    smap = SemanticMap(VS, SemanticConfig(cluster_min_pts=3))
    labels = ["blue cup", "ceramic cup", "teacup"]
    ids_seen = []
    for frame in range(10):
        smap.vote(obs_with([det(labels[frame % 3], 0.8, voxels)]), b)
        entities = smap.refresh(epoch=frame)
        if entities:
            ids_seen.append(tuple(e.entity_id for e in entities))
    assert ids_seen[-1] == ids_seen[0]
    assert len(ids_seen[-1]) == 1


def test_semantic_map_control_keeps_two():
    cup = block(5, 5, 1, 3, 3, 2)
    sofa = block(6, 6, 1, 4, 4, 2)  # overlapping but semantically far
    b = belief_with_occupied(cup + sofa)
    smap = SemanticMap(VS, SemanticConfig(cluster_min_pts=3))
    for frame in range(10):
        smap.vote(obs_with([det("cup", 0.9, cup, gt_id=0),
                            det("sofa", 0.9, sofa, gt_id=1)]), b)
        entities = smap.refresh(epoch=frame)
    assert len(entities) == 2
