"""Open-vocabulary semantic layer over the occupancy belief.

Per-voxel label votes accumulate across frames weighted by detection
confidence; entities are extracted periodically by per-label density
clustering, tracked across snapshots by box overlap, and overlapping
entities with near-synonymous labels are merged so one physical object ends
up as one entity even when its detections disagree on wording.

The embedding provider is a deterministic stand-in for a learned text
encoder: an explicit similarity fixture table covers the test vocabularies,
and a hashed character-n-gram bag covers everything else.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .belief import OCCUPIED, _BeliefReads
from .config import SemanticConfig
from .geometry import Aabb, dbscan, ios3, iou3
from .world import Observation


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def _load_fixture_table() -> dict[tuple[str, str], float]:
    table: dict[tuple[str, str], float] = {}
    text = resources.files("treenav.data").joinpath("similarity_fixtures.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        a, b, sim = line.split("|")
        table[(a.strip(), b.strip())] = float(sim)
    return table


class HashedNgramEmbedding:
    """Deterministic label embedding: hashed character trigram bag.

    A fixture table of explicit pair similarities takes precedence for
    similarity(); embed() always returns the n-gram vector (unit norm).
    """

    def __init__(self, dim: int = 256, use_fixtures: bool = True):
        self.dim = dim
        self.fixtures = _load_fixture_table() if use_fixtures else {}
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, label: str) -> np.ndarray:
        v = self._cache.get(label)
        if v is not None:
            return v
        text = f"  {label.strip().lower()}  "
        acc = np.zeros(self.dim)
        for i in range(len(text) - 2):
            gram = text[i:i + 3]
            h = int.from_bytes(hashlib.md5(gram.encode()).digest()[:4], "little")
            acc[h % self.dim] += 1.0
        n = np.linalg.norm(acc)
        v = acc / n if n > 0 else acc
        self._cache[label] = v
        return v

    def similarity(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        hit = self.fixtures.get((a, b))
        if hit is None:
            hit = self.fixtures.get((b, a))
        if hit is not None:
            return hit
        return float(self.embed(a) @ self.embed(b))


# ---------------------------------------------------------------------------
# entities and votes
# ---------------------------------------------------------------------------


@dataclass
class Entity:
    entity_id: int
    label: str
    caption: str
    bbox: Aabb
    member_voxels: np.ndarray   # (M, 3) int, lexicographically sorted
    embedding: np.ndarray
    last_seen: int = 0

    def volume(self) -> float:
        return self.bbox.volume

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "label": self.label,
            "caption": self.caption,
            "bbox": [list(map(float, self.bbox.min)), list(map(float, self.bbox.max))],
            "voxels": int(self.member_voxels.shape[0]),
            "last_seen": self.last_seen,
        }


@dataclass
class RawCluster:
    label: str
    voxels: np.ndarray
    bbox: Aabb


def _voxel_bbox(voxels: np.ndarray, vs: float) -> Aabb:
    return Aabb(min=voxels.min(axis=0) * vs, max=(voxels.max(axis=0) + 1) * vs)


def _sorted_rows(voxels: np.ndarray) -> np.ndarray:
    order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
    return voxels[order]


class VoxelVotes:
    """Per-voxel map from label to accumulated confidence-weighted score."""

    def __init__(self):
        self.scores: dict[tuple[int, int, int], dict[str, float]] = {}

    def vote(self, obs: Observation, belief: _BeliefReads) -> int:
        """Record one vote per detection mask voxel that is occupied in the
        belief; returns the number of votes cast."""
        cast = 0
        for det in obs.detections:
            mv = det.mask_voxels
            if mv.shape[0] == 0:
                continue
            occupied = belief.state[mv[:, 0], mv[:, 1], mv[:, 2]] == OCCUPIED
            for i, j, k in mv[occupied]:
                cell = self.scores.setdefault((int(i), int(j), int(k)), {})
                cell[det.label] = cell.get(det.label, 0.0) + det.confidence
                cast += 1
        return cast

    def argmax_labels(self) -> dict[tuple[int, int, int], str]:
        """Current semantic estimate per voxel; score ties break toward the
        lexicographically smallest label."""
        out = {}
        for voxel, cell in self.scores.items():
            best = min(cell.items(), key=lambda kv: (-kv[1], kv[0]))
            out[voxel] = best[0]
        return out


def extract_entities(votes: VoxelVotes, voxel_size: float,
                     eps: float, min_pts: int) -> list[RawCluster]:
    """Per-label DBSCAN over voted voxels; each dense cluster becomes one raw
    entity candidate, sub-density voxels are suppressed."""
    by_label: dict[str, list[tuple[int, int, int]]] = {}
    for voxel, label in votes.argmax_labels().items():
        by_label.setdefault(label, []).append(voxel)

    clusters = []
    for label in sorted(by_label):
        voxels = np.array(sorted(by_label[label]), dtype=np.int64)
        centers = (voxels + 0.5) * voxel_size
        labels = dbscan(centers, eps, min_pts)
        for cid in range(labels.max() + 1 if labels.size else 0):
            members = voxels[labels == cid]
            if members.shape[0] == 0:
                continue
            clusters.append(RawCluster(
                label=label,
                voxels=_sorted_rows(members),
                bbox=_voxel_bbox(members, voxel_size)))
    return clusters


def track(previous: list[Entity], clusters: list[RawCluster], tau_iou: float,
          epoch: int, retire_after: int, next_id: int,
          provider: HashedNgramEmbedding) -> tuple[list[Entity], int]:
    """Carry entity identities across snapshots by greedy box-overlap
    matching (descending IoU). Unmatched clusters become new entities;
    previous entities unseen for more than retire_after epochs retire.

    Returns (entities, next_id).
    """
    pairs = []
    for pi, prev in enumerate(previous):
        for ci, cl in enumerate(clusters):
            overlap = iou3(prev.bbox, cl.bbox)
            if overlap >= tau_iou - 1e-12:
                pairs.append((overlap, pi, ci))
    pairs.sort(key=lambda t: (-t[0], previous[t[1]].entity_id, t[2]))

    matched_prev: set[int] = set()
    matched_cl: set[int] = set()
    out: list[Entity] = []
    for overlap, pi, ci in pairs:
        if pi in matched_prev or ci in matched_cl:
            continue
        matched_prev.add(pi)
        matched_cl.add(ci)
        prev = previous[pi]
        cl = clusters[ci]
        out.append(Entity(
            entity_id=prev.entity_id,
            label=cl.label,
            caption=prev.caption,
            bbox=cl.bbox,
            member_voxels=cl.voxels,
            embedding=provider.embed(cl.label),
            last_seen=epoch))

    for ci, cl in enumerate(clusters):
        if ci in matched_cl:
            continue
        out.append(Entity(
            entity_id=next_id,
            label=cl.label,
            caption=f"a {cl.label}",
            bbox=cl.bbox,
            member_voxels=cl.voxels,
            embedding=provider.embed(cl.label),
            last_seen=epoch))
        next_id += 1

    for pi, prev in enumerate(previous):
        if pi in matched_prev:
            continue
        if epoch - prev.last_seen <= retire_after:
            out.append(prev)

    out.sort(key=lambda e: e.entity_id)
    return out, next_id


def merge(entities: list[Entity], provider: HashedNgramEmbedding,
          tau_ios: float, tau_sim: float, voxel_size: float) -> list[Entity]:
    """Spatial-semantic consolidation: while any pair overlaps (IoS) and
    their labels are near-synonyms (cosine), absorb the smaller-volume
    entity into the larger. Deterministic pair order: descending IoS, then
    ids. Runs to fixpoint."""
    pool = {e.entity_id: e for e in entities}
    while True:
        best = None
        ids = sorted(pool)
        for ai in range(len(ids)):
            for bi in range(ai + 1, len(ids)):
                a, b = pool[ids[ai]], pool[ids[bi]]
                overlap = ios3(a.bbox, b.bbox)
                if overlap < tau_ios:
                    continue
                if provider.similarity(a.label, b.label) < tau_sim:
                    continue
                key = (-overlap, a.entity_id, b.entity_id)
                if best is None or key < best[0]:
                    best = (key, a, b)
        if best is None:
            break
        _, a, b = best
        big, small = (a, b) if a.volume() >= b.volume() else (b, a)
        union = np.unique(np.vstack([big.member_voxels, small.member_voxels]), axis=0)
        captions = list(dict.fromkeys([big.caption, small.caption]))[:2]
        merged = Entity(
            entity_id=big.entity_id,
            label=big.label,
            caption="; ".join(captions),
            bbox=_voxel_bbox(union, voxel_size),
            member_voxels=_sorted_rows(union),
            embedding=big.embedding,
            last_seen=max(big.last_seen, small.last_seen))
        del pool[small.entity_id]
        pool[merged.entity_id] = merged
    return [pool[i] for i in sorted(pool)]


class SemanticMap:
    """Epoch-driven semantic pipeline: vote every frame, then
    extract/track/merge once per decision epoch."""

    def __init__(self, voxel_size: float, cfg: SemanticConfig | None = None,
                 provider: HashedNgramEmbedding | None = None):
        self.vs = voxel_size
        self.cfg = cfg or SemanticConfig()
        self.provider = provider or HashedNgramEmbedding()
        self.votes = VoxelVotes()
        self.entities: list[Entity] = []
        self._next_id = 0

    def vote(self, obs: Observation, belief: _BeliefReads) -> int:
        return self.votes.vote(obs, belief)

    def refresh(self, epoch: int) -> list[Entity]:
        clusters = extract_entities(
            self.votes, self.vs,
            eps=self.cfg.cluster_eps_voxels * self.vs,
            min_pts=self.cfg.cluster_min_pts)
        tracked, self._next_id = track(
            self.entities, clusters, self.cfg.iou_track_threshold,
            epoch, self.cfg.retire_after_epochs, self._next_id, self.provider)
        self.entities = merge(
            tracked, self.provider,
            self.cfg.ios_merge_threshold, self.cfg.sim_merge_threshold, self.vs)
        return self.entities

    def export(self) -> str:
        return json.dumps([e.to_dict() for e in self.entities],
                          sort_keys=True, indent=2) + "\n"
