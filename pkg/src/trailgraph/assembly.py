"""End-to-end extraction: masks in, road graph out.

Single-patch extraction chains candidates -> unified NMS -> pairing ->
scoring -> thresholding. Tiled extraction fuses per-patch masks into a global
frame, runs NMS once globally, re-scores edges inside every active patch with
local context, then averages duplicate edge observations before thresholding.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np

from .core import (
    ExtractionConfig,
    HeadWeights,
    PatchLayout,
    PromptPoint,
    Raster,
    RoadGraph,
    ValidationError,
    Vertex,
)
from .features import pair_candidates
from .head import score_edges
from .io import raster_from_bytes, read_raster
from .metrics import topo
from .nms import ScoredCandidate, mask_to_candidates, unified_nms
from .rasterops import blend_patches, rasterize_graph
from .synthetic import keypoint_raster


class ProviderError(RuntimeError):
    """Mask provider failure, annotated with the requested patch origin."""

    def __init__(self, origin: tuple[int, int], message: str):
        super().__init__(f"provider failed for patch {origin}: {message}")
        self.origin = origin


class MaskProvider(ABC):
    """Serves (road, keypoint) probability rasters for a patch origin."""

    patch: int

    @abstractmethod
    def masks(self, origin: tuple[int, int]) -> tuple[Raster, Raster]:
        ...


class TileDirectoryProvider(MaskProvider):
    """Reads road_X_Y.rpm / kp_X_Y.rpm files from a directory."""

    def __init__(self, directory: str | Path, patch: int = 1024):
        self.dir = Path(directory)
        self.patch = patch

    def masks(self, origin):
        ox, oy = origin
        try:
            road = read_raster(self.dir / f"road_{ox}_{oy}.rpm")
            kp = read_raster(self.dir / f"kp_{ox}_{oy}.rpm")
        except Exception as e:
            raise ProviderError(origin, str(e)) from e
        return road, kp


class SyntheticProvider(MaskProvider):
    """Renders a ground-truth graph with optional noise; deterministic per origin."""

    def __init__(self, gt: RoadGraph, patch: int = 1024, noise_sigma: float = 0.0,
                 thickness: float = 5.0, seed: int = 0):
        self.gt = gt
        self.patch = patch
        self.noise_sigma = noise_sigma
        self.thickness = thickness
        self.seed = seed

    def masks(self, origin):
        ox, oy = origin
        local = self.gt.translate(-ox, -oy)
        road = rasterize_graph(local, self.patch, self.patch, self.thickness).data
        if self.noise_sigma > 0:
            rng = np.random.default_rng((self.seed, ox, oy))
            road = np.clip(road + rng.normal(0.0, self.noise_sigma, road.shape), 0.0, 1.0)
        kp = keypoint_raster(local, self.patch, self.patch)
        return Raster(road.astype(np.float32)), kp


class RemoteProvider(MaskProvider):
    """Asks an HTTP model server for patch masks.

    Protocol: POST {url}/infer with JSON {"x", "y", "patch"}; the response is
    multipart/form-data with two RPM1 parts named "road" and "keypoint".
    """

    def __init__(self, url: str, patch: int = 1024, timeout: float = 30.0):
        import httpx

        self.url = url.rstrip("/")
        self.patch = patch
        self._client = httpx.Client(timeout=timeout)

    def masks(self, origin):
        ox, oy = origin
        try:
            resp = self._client.post(
                f"{self.url}/infer", json={"x": ox, "y": oy, "patch": self.patch}
            )
            resp.raise_for_status()
            parts = _parse_multipart(resp.headers.get("content-type", ""), resp.content)
            return raster_from_bytes(parts["road"]), raster_from_bytes(parts["keypoint"])
        except ProviderError:
            raise
        except Exception as e:
            raise ProviderError(origin, str(e)) from e


def _parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    import email
    import email.policy

    msg = email.message_from_bytes(
        b"Content-Type: " + content_type.encode() + b"\r\n\r\n" + body,
        policy=email.policy.HTTP,
    )
    parts = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            parts[name] = part.get_payload(decode=True)
    if "road" not in parts or "keypoint" not in parts:
        raise ValueError(f"multipart response missing road/keypoint parts, got {sorted(parts)}")
    return parts


def active_patches(layout: PatchLayout, prompts: list[PromptPoint]) -> list[tuple[int, int]]:
    """Sorted origins of every layout patch containing at least one prompt."""
    active: set[tuple[int, int]] = set()
    for k, p in enumerate(prompts):
        if not (0 <= p.x < layout.image_w and 0 <= p.y < layout.image_h):
            raise ValidationError(f"prompt {k} at ({p.x}, {p.y}) outside image")
        containing = layout.patches_containing(p.x, p.y)
        active.update(containing)
    return sorted(active)


class EdgeScoreTable:
    """Accumulates (sum, count) per canonical vertex pair; merge-order free."""

    def __init__(self):
        self._table: dict[tuple[int, int], tuple[float, int]] = {}

    def add(self, i: int, j: int, score: float) -> None:
        key = (min(i, j), max(i, j))
        s, c = self._table.get(key, (0.0, 0))
        self._table[key] = (s + score, c + 1)

    def means(self) -> dict[tuple[int, int], float]:
        return {k: s / c for k, (s, c) in self._table.items()}


def aggregate_edges(
    per_patch: list[list[tuple[int, int, float]]], threshold: float
) -> list[tuple[int, int]]:
    """Average duplicate observations; keep canonical pairs with mean >= threshold."""
    table = EdgeScoreTable()
    for observations in per_patch:
        for i, j, score in observations:
            table.add(i, j, score)
    return sorted(k for k, mean in table.means().items() if mean >= threshold)


def extract_graph(
    road: Raster, kp: Raster, weights: HeadWeights, config: ExtractionConfig
) -> RoadGraph:
    """Single-patch mask-to-graph pipeline."""
    if road.shape != kp.shape:
        raise ValidationError(f"mask size mismatch: road {road.shape} vs keypoints {kp.shape}")
    candidates = mask_to_candidates(kp, config.mask_threshold, "keypoint")
    candidates += mask_to_candidates(road, config.mask_threshold, "road")
    vertices = unified_nms(candidates, config.nms_radius)
    pairs = pair_candidates(vertices, config.pair_radius, config.k_max)
    scored = score_edges(weights, road, vertices, pairs, config)
    edges = [(e.src, e.dst) for e in scored if e.score >= config.edge_threshold]
    return RoadGraph.make(vertices, edges)


def extract_graph_tiled(
    provider: MaskProvider,
    layout: PatchLayout,
    weights: HeadWeights,
    config: ExtractionConfig,
    prompts: list[PromptPoint] | None = None,
    full_coverage: bool = False,
    threads: int = 1,
) -> RoadGraph:
    """Prompt-driven tiled extraction over active patches.

    Stage 1 fuses masks, stage 2 extracts global vertices then scores edges
    per patch, stage 3 averages duplicate edge scores and thresholds.
    Threaded fetch/scoring collects results in fixed patch order, so output
    is independent of `threads`.
    """
    if full_coverage:
        origins = layout.origins()
    elif prompts:
        origins = active_patches(layout, prompts)
    else:
        origins = []
    if not origins:
        return RoadGraph.empty()

    def fetch(origin):
        try:
            return provider.masks(origin)
        except ProviderError:
            raise
        except Exception as e:
            raise ProviderError(origin, str(e)) from e

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fetch, origins))
    else:
        results = [fetch(o) for o in origins]
    fetched = dict(zip(origins, results))

    # Fuse only the window actually covered by active patches.
    p = provider.patch
    wx0 = min(o[0] for o in origins)
    wy0 = min(o[1] for o in origins)
    win_w = min(max(o[0] for o in origins) + p, layout.image_w) - wx0
    win_h = min(max(o[1] for o in origins) + p, layout.image_h) - wy0
    window = PatchLayout(win_w, win_h, patch=p, stride=layout.stride)
    shifted = [((o[0] - wx0, o[1] - wy0), fetched[o][0]) for o in origins]
    fused_road = blend_patches(shifted, window)
    fused_kp = blend_patches(
        [((o[0] - wx0, o[1] - wy0), fetched[o][1]) for o in origins], window
    )

    candidates = mask_to_candidates(fused_kp, config.mask_threshold, "keypoint")
    candidates += mask_to_candidates(fused_road, config.mask_threshold, "road")
    if wx0 or wy0:
        candidates = [
            ScoredCandidate(c.x + wx0, c.y + wy0, c.base_score, c.source) for c in candidates
        ]
    vertices = unified_nms(candidates, config.nms_radius)
    if not vertices:
        return RoadGraph.empty()

    pos = np.array([(v.x, v.y) for v in vertices])

    def score_patch(origin) -> list[tuple[int, int, float]]:
        ox, oy = origin
        inside = np.nonzero(
            (pos[:, 0] >= ox) & (pos[:, 0] < ox + p) & (pos[:, 1] >= oy) & (pos[:, 1] < oy + p)
        )[0]
        if len(inside) < 2:
            return []
        local_vertices = [
            Vertex(vertices[g].x - ox, vertices[g].y - oy, vertices[g].score, vertices[g].is_keypoint)
            for g in inside
        ]
        local_pairs = pair_candidates(local_vertices, config.pair_radius, config.k_max)
        if not local_pairs:
            return []
        scored = score_edges(weights, fetched[origin][0], local_vertices, local_pairs, config)
        return [(int(inside[e.src]), int(inside[e.dst]), e.score) for e in scored]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_patch = list(pool.map(score_patch, origins))
    else:
        per_patch = [score_patch(o) for o in origins]

    edges = aggregate_edges(per_patch, config.edge_threshold)
    return RoadGraph.make(vertices, edges)


def tune_thresholds(
    val_set: list[tuple[Raster, Raster, RoadGraph]],
    weights: HeadWeights,
    config: ExtractionConfig,
    mask_grid: list[float],
    edge_grid: list[float],
    match_radius: float = 8.0,
) -> tuple[float, float]:
    """Grid-search thresholds maximizing mean TOPO F1 on the validation set.

    Ties break toward higher precision, then toward higher thresholds.
    """
    if not val_set:
        raise ValidationError("empty validation set")
    if not mask_grid or not edge_grid:
        raise ValidationError("empty threshold grid")

    best = None
    for mt in mask_grid:
        cfg_mt = ExtractionConfig.from_dict({**config.to_dict(), "mask_threshold": mt, "edge_threshold": 0.0})
        # Score once per mask threshold; sweeping the edge threshold only
        # refilters the scored edges.
        prepared = []
        for road, kp, gt in val_set:
            candidates = mask_to_candidates(kp, mt, "keypoint")
            candidates += mask_to_candidates(road, mt, "road")
            vertices = unified_nms(candidates, cfg_mt.nms_radius)
            pairs = pair_candidates(vertices, cfg_mt.pair_radius, cfg_mt.k_max)
            scored = score_edges(weights, road, vertices, pairs, cfg_mt)
            prepared.append((vertices, scored, gt))
        for et in edge_grid:
            f1s, precisions = [], []
            for vertices, scored, gt in prepared:
                edges = [(e.src, e.dst) for e in scored if e.score >= et]
                result = topo(gt, RoadGraph.make(vertices, edges), match_radius=match_radius)
                f1s.append(result.f1)
                precisions.append(result.precision)
            key = (float(np.mean(f1s)), float(np.mean(precisions)), mt, et)
            if best is None or key > best:
                best = key
    return best[2], best[3]
