"""Synthetic road scenes for tests and head training.

A scene is a random planar-ish graph rendered to a noisy road-probability
raster plus a keypoint raster with Gaussian bumps at junctions and endpoints.
Occlusion gaps zero the road raster along chosen sub-segments while the
ground-truth graph stays intact, reproducing the hard cases path features are
meant to survive.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay

from .core import Raster, RoadGraph, ValidationError, Vertex
from .head import TrainBatch, groups_from_sources
from .features import extract_edge_features
from .rasterops import _segment_distance_field, rasterize_graph

KEYPOINT_SIGMA = 2.0  # px, blob width of keypoint bumps


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    family: str = "planar"  # "grid" | "tree" | "planar"
    size: int = 256
    n_vertices: int = 12
    noise_sigma: float = 0.05
    num_gaps: int = 0
    gap_length: float = 14.0
    gaps: tuple = ()  # explicit ((x0, y0), (x1, y1)) segments to zero
    thickness: float = 5.0
    min_separation: float = 36.0
    margin: float = 18.0
    # Subdivide edges into ~chain_spacing segments with slight lateral jitter,
    # like real polyline road annotations; 0 keeps straight junction-to-junction
    # edges. Chain vertices have degree 2, so they never become keypoints.
    chain_spacing: float = 0.0
    chain_jitter: float = 1.0

    def __post_init__(self):
        if self.family not in ("grid", "tree", "planar"):
            raise ValidationError(f"unknown graph family {self.family!r}")
        if self.size < 32 or self.n_vertices < 2:
            raise ValidationError("scene too small")


@dataclass
class Scene:
    gt: RoadGraph
    road: Raster
    kp: Raster
    gap_edges: list[int] = field(default_factory=list)
    gap_segments: list[tuple[tuple[float, float], tuple[float, float]]] = field(default_factory=list)


def _poisson_points(rng, n, size, margin, min_sep) -> np.ndarray:
    """Rejection-sampled points with pairwise separation >= min_sep."""
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < n and attempts < 4000:
        attempts += 1
        p = rng.uniform(margin, size - margin, size=2)
        if all(np.hypot(*(p - q)) >= min_sep for q in pts):
            pts.append(p)
    return np.array(pts)


def _mst_edges(pos: np.ndarray) -> list[tuple[int, int]]:
    n = len(pos)
    ii, jj = np.triu_indices(n, k=1)
    d = np.hypot(pos[ii, 0] - pos[jj, 0], pos[ii, 1] - pos[jj, 1])
    tree = minimum_spanning_tree(coo_matrix((d, (ii, jj)), shape=(n, n)))
    return [(min(i, j), max(i, j)) for i, j in zip(*tree.nonzero())]


def _planar_edges(rng, pos: np.ndarray) -> list[tuple[int, int]]:
    """MST plus a few short Delaunay edges: connected, planar, with cycles."""
    edges = set(_mst_edges(pos))
    if len(pos) >= 4:
        tri = Delaunay(pos)
        dela = set()
        for simplex in tri.simplices:
            for a in range(3):
                i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
                dela.add((min(i, j), max(i, j)))
        extras = sorted(
            dela - edges,
            key=lambda e: float(np.hypot(*(pos[e[0]] - pos[e[1]]))),
        )
        for e in extras[: max(1, len(pos) // 3)]:
            if rng.uniform() < 0.6:
                edges.add(e)
    return sorted(edges)


def _grid_graph(rng, spec: SceneSpec) -> tuple[np.ndarray, list[tuple[int, int]]]:
    side = max(2, int(round(np.sqrt(spec.n_vertices))))
    spacing = (spec.size - 2 * spec.margin) / (side - 1)
    xs, ys = np.meshgrid(np.arange(side), np.arange(side))
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1) * spacing + spec.margin
    pos = pos + rng.normal(0.0, spacing * 0.08, size=pos.shape)
    pos = np.clip(pos, 2.0, spec.size - 3.0)
    edges = []
    for y in range(side):
        for x in range(side):
            i = y * side + x
            if x + 1 < side and rng.uniform() > 0.2:
                edges.append((i, i + 1))
            if y + 1 < side and rng.uniform() > 0.2:
                edges.append((i, i + side))
    return pos, sorted(set(edges))


def _subdivide(rng, pos: np.ndarray, edges, spacing: float, jitter: float, size: int):
    """Split edges into ~spacing-length chain segments with lateral jitter."""
    points = [p for p in pos]
    out_edges = []
    for i, j in edges:
        a, b = pos[i], pos[j]
        length = float(np.hypot(*(b - a)))
        n_seg = max(1, int(round(length / spacing)))
        normal = np.array([-(b - a)[1], (b - a)[0]]) / max(length, 1e-9)
        prev = i
        for k in range(1, n_seg):
            p = a + (k / n_seg) * (b - a) + normal * rng.normal(0.0, jitter)
            p = np.clip(p, 1.0, size - 2.0)
            points.append(p)
            cur = len(points) - 1
            out_edges.append((prev, cur))
            prev = cur
        out_edges.append((prev, j))
    return np.array(points), out_edges


def make_graph(spec: SceneSpec) -> RoadGraph:
    rng = np.random.default_rng(spec.seed)
    if spec.family == "grid":
        pos, edges = _grid_graph(rng, spec)
    else:
        pos = _poisson_points(rng, spec.n_vertices, spec.size, spec.margin, spec.min_separation)
        if len(pos) < 2:
            raise ValidationError("could not place vertices; relax min_separation")
        edges = _mst_edges(pos) if spec.family == "tree" else _planar_edges(rng, pos)
    if spec.chain_spacing > 0:
        pos, edges = _subdivide(rng, pos, edges, spec.chain_spacing, spec.chain_jitter, spec.size)
    verts = [Vertex(float(x), float(y)) for x, y in pos]
    return RoadGraph.make(verts, [(min(i, j), max(i, j)) for i, j in edges])


def keypoint_raster(graph: RoadGraph, h: int, w: int, sigma: float = KEYPOINT_SIGMA) -> Raster:
    """Gaussian bumps (peak 1.0) at every vertex with degree != 2."""
    out = np.zeros((h, w), dtype=np.float64)
    deg = graph.degrees()
    reach = int(np.ceil(4 * sigma))
    for idx, v in enumerate(graph.vertices):
        if deg[idx] == 2:
            continue
        x0, y0 = int(np.floor(v.x)) - reach, int(np.floor(v.y)) - reach
        x1, y1 = x0 + 2 * reach + 1, y0 + 2 * reach + 1
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(w, x1), min(h, y1)
        if x0 >= x1 or y0 >= y1:
            continue
        gy, gx = np.mgrid[y0:y1, x0:x1]
        bump = np.exp(-((gx - v.x) ** 2 + (gy - v.y) ** 2) / (2 * sigma * sigma))
        np.maximum(out[y0:y1, x0:x1], bump, out=out[y0:y1, x0:x1])
    return Raster(out.astype(np.float32))


def _zero_segment(data: np.ndarray, seg, reach: float) -> None:
    (x0, y0), (x1, y1) = seg
    ys, xs = _segment_distance_field(data.shape[0], data.shape[1], x0, y0, x1, y1, reach)
    data[ys, xs] = 0.0


def make_scene(spec: SceneSpec) -> Scene:
    """Ground-truth graph plus noisy road and keypoint rasters."""
    rng = np.random.default_rng(spec.seed)
    gt = make_graph(spec)
    road = rasterize_graph(gt, spec.size, spec.size, spec.thickness).data.astype(np.float64)
    if spec.noise_sigma > 0:
        road = road + rng.normal(0.0, spec.noise_sigma, size=road.shape)
    road = np.clip(road, 0.0, 1.0)

    gap_edges: list[int] = []
    gap_segments = []
    cut_reach = spec.thickness / 2.0 + 1.5
    pos = gt.positions()
    if spec.num_gaps > 0:
        lengths = gt.edge_lengths()
        eligible = [k for k in range(gt.num_edges) if lengths[k] >= 3.0 * spec.gap_length]
        rng.shuffle(eligible)
        for k in eligible[: spec.num_gaps]:
            i, j = gt.edges[k]
            t_mid = rng.uniform(0.35, 0.65)
            half = spec.gap_length / 2.0 / lengths[k]
            a = pos[i] + (t_mid - half) * (pos[j] - pos[i])
            b = pos[i] + (t_mid + half) * (pos[j] - pos[i])
            seg = ((float(a[0]), float(a[1])), (float(b[0]), float(b[1])))
            _zero_segment(road, seg, cut_reach)
            gap_edges.append(k)
            gap_segments.append(seg)
    for seg in spec.gaps:
        _zero_segment(road, seg, cut_reach)
        gap_segments.append(seg)

    kp = keypoint_raster(gt, spec.size, spec.size)
    return Scene(gt, Raster(road.astype(np.float32)), kp, gap_edges, gap_segments)


def make_edge_dataset(
    n_scenes: int,
    template: SceneSpec,
    kernels: tuple[int, ...] = (3, 9, 15),
    pair_radius: float = 160.0,
    neg_ratio: float = 1.0,
    n_samples: int = 32,
    tau: float = 5.0,
) -> list[TrainBatch]:
    """One TrainBatch per scene: positives are GT edges, negatives random
    non-adjacent vertex pairs within the pairing radius, grouped by source."""
    if n_scenes < 1:
        raise ValidationError("need at least one scene")
    batches = []
    for s in range(n_scenes):
        spec = SceneSpec(**{**template.__dict__, "seed": template.seed + s})
        scene = make_scene(spec)
        gt = scene.gt
        rng = np.random.default_rng(spec.seed + 987654321)
        pos_pairs = set(gt.edges)
        pts = gt.positions()
        negatives = []
        n = gt.num_vertices
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) in pos_pairs:
                    continue
                if np.hypot(*(pts[i] - pts[j])) <= pair_radius:
                    negatives.append((i, j))
        want = int(round(neg_ratio * len(pos_pairs)))
        if len(negatives) > want:
            pick = rng.choice(len(negatives), size=want, replace=False)
            negatives = [negatives[int(k)] for k in sorted(pick)]
        labeled = [(p, 1.0) for p in pos_pairs] + [(p, 0.0) for p in negatives]
        labeled.sort(key=lambda t: t[0])
        pairs = [p for p, _ in labeled]
        labels = np.array([l for _, l in labeled])
        edges = extract_edge_features(
            scene.road, list(gt.vertices), pairs, kernels, pair_radius, n_samples, tau
        )
        feats = np.stack([e.feature_vector() for e in edges])
        groups = groups_from_sources([e.src for e in edges])
        batches.append(TrainBatch(feats, groups, labels))
    return batches
