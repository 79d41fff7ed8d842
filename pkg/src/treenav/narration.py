"""Turns a decision-tree snapshot plus the belief and entity maps into
structured per-edge annotations, per-subtree narratives with spatial trends,
and natural-language option captions.

A forward-facing virtual camera walks each edge from parent to child at a
fixed arc-length step; at viewpoint nodes it widens to a panoramic sweep.
Entities are logged at the first sample that sees any of their voxels;
visible unknown space is clustered and tied to its nearest known entity.
Everything is deterministic: identical inputs give byte-identical captions.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .belief import _BeliefReads
from .config import NarrationConfig, SemanticConfig, SensorConfig
from .decision import ROOT, TERMINAL, DecisionTree, TreeSnapshot, root_subtrees
from .geometry import Frustum, Pose, batch_segment_visible
from .semantics import Entity

NARRATIVE_FORMAT = "narrative-v1"

APPROACHING, RECEDING, STABLE = "approaching", "receding", "stable"


def load_archetypes() -> tuple[dict[str, str], dict[str, str]]:
    data = json.loads(
        resources.files("treenav.data").joinpath("archetypes.json").read_text())
    return data["labels"], data["phrases"]


@dataclass
class KnownSighting:
    entity_id: int
    label: str
    caption: str
    distance: float          # arc length from the edge's parent node


@dataclass
class UnknownEntry:
    volume: float
    nearest_entity: int | None
    distance: float | None   # centroid to that entity's box center
    centroid: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class EdgeAnnotation:
    edge: tuple[int, int]    # (parent index, child index) in the tree
    length: float
    known: list[KnownSighting] = field(default_factory=list)
    unknown: list[UnknownEntry] = field(default_factory=list)


@dataclass
class SubtreeNarrative:
    root_child: int
    annotations: list[EdgeAnnotation]
    trends: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class OptionCaption:
    option_index: int
    text: str
    source: str = "template"


# ---------------------------------------------------------------------------
# per-edge annotation
# ---------------------------------------------------------------------------


def _entity_first_sighting(entities, frustum, belief, pending: set[int]):
    """Entity ids from `pending` with at least one unoccluded member voxel
    center inside the frustum."""
    seen = []
    for ent in entities:
        if ent.entity_id not in pending:
            continue
        box = ent.bbox
        if box.distance_to_point(frustum.pose.position) > frustum.far:
            continue
        centers = (ent.member_voxels + 0.5) * belief.vs
        inside = frustum.contains_many(centers)
        if not inside.any():
            continue
        vis = batch_segment_visible(frustum.pose.position, centers[inside],
                                    belief.occupied_mask(), belief.vs)
        if vis.any():
            seen.append(ent.entity_id)
    return seen


def annotate_edge(edge: tuple[int, int], tree: DecisionTree,
                  belief: _BeliefReads, entities: list[Entity],
                  sensor: SensorConfig, base_z: float, camera_height: float,
                  cfg: NarrationConfig | None = None,
                  semantic_cfg: SemanticConfig | None = None) -> EdgeAnnotation:
    """Walk one edge with the virtual camera and log what it would see."""
    cfg = cfg or NarrationConfig()
    semantic_cfg = semantic_cfg or SemanticConfig()
    parent, child = edge
    p = tree.positions[parent]
    c = tree.positions[child]
    length = float(np.linalg.norm(c - p))
    ann = EdgeAnnotation(edge=edge, length=length)

    if length < 1e-9 and tree.tags[child] != TERMINAL:
        return ann
    direction = (c - p) / length if length > 1e-9 else np.array([1.0, 0.0])
    yaw = math.atan2(direction[1], direction[0])

    arcs = list(np.arange(0.0, length, cfg.sample_step))
    if not arcs or length - arcs[-1] > 1e-9:
        arcs.append(length)

    ent_by_id = {e.entity_id: e for e in entities}
    pending = set(ent_by_id)
    sightings: dict[int, float] = {}
    unknown_union: set[tuple[int, int, int]] = set()

    def observe(frustum: Frustum, arc: float):
        for eid in _entity_first_sighting(entities, frustum, belief, pending):
            pending.discard(eid)
            sightings[eid] = arc
        for idx in belief.visible_unknown(frustum):
            unknown_union.add((int(idx[0]), int(idx[1]), int(idx[2])))

    for arc in arcs:
        pos = p + direction * arc
        cam = Pose(np.array([pos[0], pos[1], base_z + camera_height]), yaw=yaw)
        observe(Frustum(pose=cam, hfov=sensor.hfov, vfov=sensor.vfov,
                        near=sensor.near, far=sensor.far), arc)

    if tree.tags[child] == TERMINAL:
        # panoramic sweep at the viewpoint itself
        cam_pos = np.array([c[0], c[1], base_z + camera_height])
        for h in range(cfg.panoramic_headings):
            cam = Pose(cam_pos, yaw=2 * math.pi * h / cfg.panoramic_headings)
            observe(Frustum(pose=cam, hfov=sensor.hfov, vfov=sensor.vfov,
                            near=sensor.near, far=sensor.far), length)

    for eid in sorted(sightings):
        ent = ent_by_id[eid]
        ann.known.append(KnownSighting(
            entity_id=eid, label=ent.label, caption=ent.caption,
            distance=float(sightings[eid])))
    ann.known.sort(key=lambda s: (s.distance, s.entity_id))

    if unknown_union:
        idx = np.array(sorted(unknown_union), dtype=np.int64)
        clusters = belief.unknown_clusters(
            region=None, eps=semantic_cfg.cluster_eps_voxels * belief.vs,
            min_pts=semantic_cfg.cluster_min_pts, mask_indices=idx)
        for cl in clusters:
            nearest, dist = None, None
            for ent in entities:
                d = float(np.linalg.norm(ent.bbox.center - cl.centroid))
                if dist is None or d < dist or (d == dist and ent.entity_id < nearest):
                    nearest, dist = ent.entity_id, d
            ann.unknown.append(UnknownEntry(
                volume=cl.volume, nearest_entity=nearest, distance=dist,
                centroid=tuple(round(float(x), 9) for x in cl.centroid)))
        ann.unknown.sort(key=lambda u: (
            u.distance if u.distance is not None else math.inf,
            -u.volume, u.centroid))
    return ann


def annotate_tree(tree: DecisionTree, belief: _BeliefReads,
                  entities: list[Entity], sensor: SensorConfig,
                  base_z: float, camera_height: float,
                  cfg: NarrationConfig | None = None,
                  semantic_cfg: SemanticConfig | None = None,
                  parallel: bool = False) -> dict[tuple[int, int], EdgeAnnotation]:
    """Annotate every edge; the parallel path produces results identical to
    sequential execution (edges are independent, merge order is fixed)."""
    edges = [(p, i) for i, p in enumerate(tree.parents) if p is not None]

    def work(edge):
        return annotate_edge(edge, tree, belief, entities, sensor,
                             base_z, camera_height, cfg, semantic_cfg)

    if parallel and len(edges) > 1:
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(work, edges))
    else:
        results = [work(e) for e in edges]
    return {e: a for e, a in zip(edges, results)}


# ---------------------------------------------------------------------------
# tree-level assembly
# ---------------------------------------------------------------------------


def assemble(tree: DecisionTree,
             annotations: dict[tuple[int, int], EdgeAnnotation]) -> list[SubtreeNarrative]:
    """Order annotations top-down per root subtree and derive per-entity
    spatial trends from effective (root arc-length) sighting distances.

    Along one root-to-leaf chain an entity sighted on two or more edges is
    approaching when those distances strictly decrease, receding when they
    strictly increase, stable otherwise; chains that disagree read stable.
    """
    depth = tree.depth_from_root()
    ch = tree.children()
    out = []
    for root_child, members in root_subtrees(tree):
        ordered: list[EdgeAnnotation] = []
        stack = [root_child]
        while stack:
            node = stack.pop()
            edge = (tree.parents[node], node)
            if edge in annotations:
                ordered.append(annotations[edge])
            for c in sorted(ch[node], reverse=True):
                stack.append(c)

        # chains: root-child to each leaf of the subtree
        leaves = [i for i in members if not ch[i]]
        verdicts: dict[int, set[str]] = {}
        for leaf in leaves:
            path = tree.path_to(leaf)
            seq: dict[int, list[float]] = {}
            for parent, node in zip(path, path[1:]):
                ann = annotations.get((parent, node))
                if ann is None:
                    continue
                for s in ann.known:
                    seq.setdefault(s.entity_id, []).append(depth[parent] + s.distance)
            for eid, dists in seq.items():
                if len(dists) < 2:
                    continue
                if all(b < a for a, b in zip(dists, dists[1:])):
                    verdicts.setdefault(eid, set()).add(APPROACHING)
                elif all(b > a for a, b in zip(dists, dists[1:])):
                    verdicts.setdefault(eid, set()).add(RECEDING)
                else:
                    verdicts.setdefault(eid, set()).add(STABLE)

        trends = []
        for eid in sorted(verdicts):
            vs = verdicts[eid]
            trends.append((eid, vs.pop() if len(vs) == 1 else STABLE))
        out.append(SubtreeNarrative(root_child=root_child,
                                    annotations=ordered, trends=trends))
    return out


# ---------------------------------------------------------------------------
# captioning
# ---------------------------------------------------------------------------


def serialize_narrative(n: SubtreeNarrative, option_index: int) -> str:
    """The versioned structured-text payload handed to a summarizer."""
    lines = [f"{NARRATIVE_FORMAT} option={option_index} subtree={n.root_child}"]
    for ann in n.annotations:
        head = f"EDGE {ann.edge[0]}->{ann.edge[1]} len={ann.length:.2f}m"
        known = ", ".join(
            f"{s.label}#{s.entity_id} @ {s.distance:.2f}m" for s in ann.known) or "-"
        unknown = ", ".join(
            (f"{u.volume:.2f}m3 unknown"
             + (f" near #{u.nearest_entity} @ {u.distance:.2f}m"
                if u.nearest_entity is not None else ""))
            for u in ann.unknown) or "-"
        lines.append(f"{head} | known: {known} | unknown: {unknown}")
    if n.trends:
        lines.append("TRENDS " + ", ".join(f"#{e}:{t}" for e, t in n.trends))
    return "\n".join(lines) + "\n"


def _fmt_volume(v: float) -> str:
    return f"{v:.1f} m3"


def template_caption(n: SubtreeNarrative, option_index: int) -> OptionCaption:
    """Deterministic caption: dominant room archetype, up to three salient
    entities by sighting count, total unexplored volume, trend phrases."""
    label_arch, phrases = load_archetypes()

    counts: dict[int, int] = {}
    labels: dict[int, str] = {}
    for ann in n.annotations:
        for s in ann.known:
            counts[s.entity_id] = counts.get(s.entity_id, 0) + 1
            labels[s.entity_id] = s.label

    seen_clusters = set()
    total_unknown = 0.0
    for ann in n.annotations:
        for u in ann.unknown:
            key = (round(u.volume, 9), u.centroid)
            if key in seen_clusters:
                continue
            seen_clusters.add(key)
            total_unknown += u.volume

    arch_votes: dict[str, int] = {}
    for eid, cnt in counts.items():
        arch = label_arch.get(labels[eid])
        if arch:
            arch_votes[arch] = arch_votes.get(arch, 0) + cnt

    parts = []
    if arch_votes:
        dominant = min(arch_votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        parts.append(phrases.get(dominant, f"a {dominant}"))
        salient = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
        names = [f"a {labels[eid]}" for eid, _ in salient]
        parts[-1] += " with " + ", ".join(names)
    elif counts:
        salient = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
        names = [f"a {labels[eid]}" for eid, _ in salient]
        parts.append("a passage with " + ", ".join(names))
    else:
        parts.append("an unexplored direction with no recognized objects")

    if total_unknown > 0:
        parts.append(f"about {_fmt_volume(total_unknown)} unexplored")
    if n.trends:
        phrases_t = [f"{t} a {labels.get(e, 'region')}" if e in labels
                     else f"{t} an unlabeled region"
                     for e, t in n.trends]
        parts.append(", ".join(phrases_t))
    return OptionCaption(option_index=option_index, text="; ".join(parts),
                         source="template")


def caption(n: SubtreeNarrative, option_index: int,
            summarizer=None) -> OptionCaption:
    """Caption one subtree: through the external summarizer when given (its
    text is used verbatim), falling back to the template on any failure."""
    if summarizer is not None:
        try:
            text = summarizer(serialize_narrative(n, option_index))
            if text and text.strip():
                return OptionCaption(option_index=option_index,
                                     text=text.strip(),
                                     source="external-summarizer")
        except Exception:
            pass
    return template_caption(n, option_index)


def caption_all(narratives: list[SubtreeNarrative], summarizer=None) -> list[OptionCaption]:
    return [caption(n, i, summarizer) for i, n in enumerate(narratives)]


VOLUME_RE = re.compile(r"(\d+(?:\.\d+)?)\s*m3")


def parse_unknown_volume(text: str) -> float:
    """Total unexplored volume mentioned in a caption, 0 when absent."""
    return sum(float(m) for m in VOLUME_RE.findall(text))
