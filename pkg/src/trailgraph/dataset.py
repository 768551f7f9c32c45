"""Dataset curation: graph cropping, density filtering, WL-kernel diversity
selection, and simulated prompt generation.

Partitioning follows a generate-filter-select scheme: a coarse stride-1024
grid guarantees coverage, a dense stride-256 grid supplies extra topology, and
candidates from the dense grid are admitted only when their Weisfeiler-Lehman
similarity to already-selected overlapping patches stays below a threshold.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .core import PromptPoint, Raster, RoadGraph, ValidationError, Vertex
from .rasterops import dilate, rasterize_graph


@dataclass
class PatchSample:
    origin: tuple[int, int]
    graph: RoadGraph  # patch-local coordinates
    density: float  # total edge length / patch area, px/px^2
    source_set: str  # "A" (coarse grid) | "B" (dense grid)


def _liang_barsky(p, q, rect):
    """Clip segment p->q to rect; returns (t0, t1) or None if fully outside."""
    x0, y0, x1, y1 = rect
    dx, dy = q[0] - p[0], q[1] - p[1]
    t0, t1 = 0.0, 1.0
    for num, den in (
        (p[0] - x0, -dx),
        (x1 - p[0], dx),
        (p[1] - y0, -dy),
        (y1 - p[1], dy),
    ):
        if den == 0.0:
            if num < 0.0:
                return None
            continue
        t = -num / den if den < 0.0 else num / den
        if den < 0.0:
            if t > t1:
                return None
            t0 = max(t0, t)
        else:
            if t < t0:
                return None
            t1 = min(t1, t)
    if t0 > t1:
        return None
    return (t0, t1)


def crop_graph(graph: RoadGraph, rect: tuple[float, float, float, float]) -> RoadGraph:
    """Clip to a closed axis-aligned rect (x0, y0, x1, y1).

    Inside vertices survive; edges crossing the border are cut at the exact
    intersection with a new boundary vertex (is_keypoint False); edges fully
    outside vanish. Coordinates stay in the input frame.
    """
    x0, y0, x1, y1 = rect
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"degenerate rect {rect}")

    def inside(v: Vertex) -> bool:
        return x0 <= v.x <= x1 and y0 <= v.y <= y1

    new_vertices: list[Vertex] = []
    index_of: dict[int, int] = {}
    for k, v in enumerate(graph.vertices):
        if inside(v):
            index_of[k] = len(new_vertices)
            new_vertices.append(v)

    boundary: dict[tuple[float, float], int] = {}

    def boundary_vertex(x: float, y: float) -> int:
        key = (x, y)
        if key not in boundary:
            boundary[key] = len(new_vertices)
            new_vertices.append(Vertex(x, y, is_keypoint=False))
        return boundary[key]

    pos = graph.positions()
    new_edges: set[tuple[int, int]] = set()
    for i, j in graph.edges:
        clip = _liang_barsky(pos[i], pos[j], rect)
        if clip is None:
            continue
        t0, t1 = clip
        if t0 == t1:
            continue  # grazes a corner at a single point
        if t0 == 0.0 and i in index_of:
            a = index_of[i]
        else:
            pa = pos[i] + t0 * (pos[j] - pos[i])
            a = boundary_vertex(float(pa[0]), float(pa[1]))
        if t1 == 1.0 and j in index_of:
            b = index_of[j]
        else:
            pb = pos[i] + t1 * (pos[j] - pos[i])
            b = boundary_vertex(float(pb[0]), float(pb[1]))
        if a != b:
            new_edges.add((min(a, b), max(a, b)))
    return RoadGraph.make(new_vertices, sorted(new_edges))


def density(graph: RoadGraph, area_px2: float) -> float:
    """Total edge length per unit area."""
    if area_px2 <= 0:
        raise ValidationError("area must be positive")
    return graph.total_length() / area_px2


def wl_signature(graph: RoadGraph, h: int = 3) -> Counter:
    """Multiset of WL labels accumulated over h refinement iterations.

    Initial label is the vertex degree; labels are purely structural, so
    isomorphic graphs share signatures exactly.
    """
    adj: list[list[int]] = [[] for _ in graph.vertices]
    for i, j in graph.edges:
        adj[i].append(j)
        adj[j].append(i)
    labels = [str(d) for d in graph.degrees()]
    sig: Counter = Counter()
    for it in range(h + 1):
        sig.update(f"{it}:{l}" for l in labels)
        if it == h:
            break
        labels = [
            labels[n] + "|" + ",".join(sorted(labels[m] for m in adj[n]))
            for n in range(len(labels))
        ]
    return sig


def wl_similarity(g1: RoadGraph, g2: RoadGraph, h: int = 3) -> float:
    """Cosine similarity of WL label histograms; 1.0 for isomorphic graphs."""
    s1, s2 = wl_signature(g1, h), wl_signature(g2, h)
    if not s1 and not s2:
        return 1.0
    if not s1 or not s2:
        return 0.0
    dot = sum(c * s2[k] for k, c in s1.items())
    n1 = np.sqrt(sum(c * c for c in s1.values()))
    n2 = np.sqrt(sum(c * c for c in s2.values()))
    return float(dot / (n1 * n2))


def _grid(image_w: int, image_h: int, patch: int, stride: int) -> list[tuple[int, int]]:
    return [
        (x, y)
        for y in range(0, image_h - patch + 1, stride)
        for x in range(0, image_w - patch + 1, stride)
    ]


def _crop_sample(gt: RoadGraph, origin: tuple[int, int], patch: int, source_set: str) -> PatchSample:
    ox, oy = origin
    local = crop_graph(gt, (ox, oy, ox + patch, oy + patch)).translate(-ox, -oy)
    return PatchSample(origin, local, density(local, float(patch) * patch), source_set)


def partition(
    image_w: int,
    image_h: int,
    gt: RoadGraph,
    tau_density: float = 1e-4,
    tau_sim: float = 0.95,
    patch: int = 1024,
    dense_stride: int = 256,
    wl_iterations: int = 3,
) -> tuple[list[PatchSample], list[dict]]:
    """Generate-filter-select patch curation.

    Returns the selected samples and a per-candidate report (origin, set,
    density, decision, reason, and the blocking similarity where relevant).
    """
    if tau_density < 0 or tau_sim < 0:
        raise ValidationError("thresholds must be >= 0")
    report: list[dict] = []
    selected: list[PatchSample] = []

    set_a = [_crop_sample(gt, o, patch, "A") for o in _grid(image_w, image_h, patch, patch)]
    for s in set_a:
        if s.density >= tau_density:
            selected.append(s)
            report.append({"origin": list(s.origin), "set": "A", "density": s.density,
                           "admitted": True, "reason": "coverage grid"})
        else:
            report.append({"origin": list(s.origin), "set": "A", "density": s.density,
                           "admitted": False, "reason": "below density threshold"})

    set_b = []
    for o in _grid(image_w, image_h, patch, dense_stride):
        s = _crop_sample(gt, o, patch, "B")
        if s.density >= tau_density:
            set_b.append(s)
        else:
            report.append({"origin": list(s.origin), "set": "B", "density": s.density,
                           "admitted": False, "reason": "below density threshold"})
    set_b.sort(key=lambda s: (-s.density, s.origin[1], s.origin[0]))

    for cand in set_b:
        neighbors = [
            s for s in selected
            if abs(s.origin[0] - cand.origin[0]) < patch and abs(s.origin[1] - cand.origin[1]) < patch
        ]
        max_sim = max(
            (wl_similarity(cand.graph, n.graph, wl_iterations) for n in neighbors), default=0.0
        )
        if max_sim < tau_sim:
            selected.append(cand)
            report.append({"origin": list(cand.origin), "set": "B", "density": cand.density,
                           "admitted": True, "reason": "diverse", "max_sim": max_sim})
        else:
            report.append({"origin": list(cand.origin), "set": "B", "density": cand.density,
                           "admitted": False, "reason": "redundant topology", "max_sim": max_sim})
    return selected, report


def simulate_prompts(
    gt: RoadGraph,
    patch_size: int,
    n_pos: int = 10,
    ratio: float = 1.0,
    dist_min: float = 50.0,
    jitter_sigma: float = 3.0,
    seed: int = 0,
    thickness: float = 5.0,
) -> list[PromptPoint]:
    """Simulated annotator clicks for one patch.

    Positives come from junction/endpoint vertices (degree != 2); negatives
    from pixels farther than dist_min from the rasterized road. Jitter is
    Gaussian with its displacement norm capped at 3 sigma, so negatives stay
    at least dist_min - 3*sigma away from any road pixel.
    """
    if n_pos < 0:
        raise ValidationError("n_pos must be >= 0")
    rng = np.random.default_rng(seed)
    deg = gt.degrees()
    pool = [v for k, v in enumerate(gt.vertices) if deg[k] != 2]
    chosen: list[tuple[float, float, str]] = []
    if n_pos > 0 and pool:
        idx = rng.choice(len(pool), size=min(n_pos, len(pool)), replace=False)
        chosen.extend((pool[int(k)].x, pool[int(k)].y, "positive") for k in sorted(idx))

    n_neg = int(round(ratio * len(chosen)))
    if n_neg > 0:
        road = rasterize_graph(gt, patch_size, patch_size, thickness)
        buffer = dilate(road, dist_min)
        bg_y, bg_x = np.nonzero(buffer.data == 0)
        if len(bg_x) == 0:
            raise ValidationError("no negative region")
        idx = rng.choice(len(bg_x), size=min(n_neg, len(bg_x)), replace=False)
        chosen.extend((float(bg_x[k]), float(bg_y[k]), "negative") for k in sorted(idx))

    if not chosen:
        return []
    offsets = rng.normal(0.0, jitter_sigma, size=(len(chosen), 2))
    norms = np.linalg.norm(offsets, axis=1)
    cap = 3.0 * jitter_sigma
    over = norms > cap
    offsets[over] *= (cap / norms[over])[:, None]
    out = []
    for (x, y, pol), (jx, jy) in zip(chosen, offsets):
        px = float(np.clip(x + jx, 0.0, patch_size - 1))
        py = float(np.clip(y + jy, 0.0, patch_size - 1))
        out.append(PromptPoint(px, py, pol))
    return out
