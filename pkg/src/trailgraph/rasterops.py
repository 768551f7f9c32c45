"""Pure raster kernels: pooling, sampling, rasterization, morphology, blending.

Everything here is side-effect free and safe to parallelize across patches.
Border handling: pooling replicates edges, sampling clamps out-of-bounds
coordinates to the border.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import PatchLayout, PromptPoint, Raster, RoadGraph, ValidationError


def box_filter(raster: Raster, kernel: int) -> Raster:
    """Mean over a kernel x kernel window, edges replicated. kernel must be odd."""
    kernel = int(kernel)
    if kernel < 1 or kernel % 2 == 0:
        raise ValidationError(f"box filter kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return Raster(raster.data.copy())
    half = kernel // 2
    padded = np.pad(raster.data.astype(np.float64), half, mode="edge")
    # Summed-area table with a leading zero row/column so window sums are
    # pure differences.
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=sat[1:, 1:])
    h, w = raster.shape
    k = kernel
    sums = sat[k : k + h, k : k + w] - sat[:h, k : k + w] - sat[k : k + h, :w] + sat[:h, :w]
    return Raster((sums / (k * k)).astype(np.float32))


def bilinear_sample_many(raster: Raster, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at float coordinates, clamped to the border.

    Returns float64 values; exact at integer lattice points.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValidationError("non-finite sample coordinate")
    h, w = raster.shape
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    d = raster.data
    top = d[y0, x0] * (1.0 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1.0 - fx) + d[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_sample(raster: Raster, x: float, y: float) -> float:
    return float(bilinear_sample_many(raster, np.array([x]), np.array([y]))[0])


def _segment_distance_field(h: int, w: int, x0, y0, x1, y1, reach: float) -> tuple:
    """Pixels within `reach` of segment (x0,y0)-(x1,y1); returns (ys, xs) indices."""
    lo_x = max(0, int(np.floor(min(x0, x1) - reach)))
    hi_x = min(w - 1, int(np.ceil(max(x0, x1) + reach)))
    lo_y = max(0, int(np.floor(min(y0, y1) - reach)))
    hi_y = min(h - 1, int(np.ceil(max(y0, y1) + reach)))
    if lo_x > hi_x or lo_y > hi_y:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64))
    gy, gx = np.mgrid[lo_y : hi_y + 1, lo_x : hi_x + 1]
    dx, dy = x1 - x0, y1 - y0
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        dist2 = (gx - x0) ** 2 + (gy - y0) ** 2
    else:
        t = np.clip(((gx - x0) * dx + (gy - y0) * dy) / seg_len2, 0.0, 1.0)
        dist2 = (gx - (x0 + t * dx)) ** 2 + (gy - (y0 + t * dy)) ** 2
    mask = dist2 <= reach * reach
    return (gy[mask], gx[mask])


def rasterize_graph(graph: RoadGraph, h: int, w: int, thickness: float = 5.0) -> Raster:
    """Binary raster: 1 wherever a pixel center lies within thickness/2 of any edge."""
    out = np.zeros((h, w), dtype=np.float32)
    pos = graph.positions()
    reach = thickness / 2.0
    for i, j in graph.edges:
        ys, xs = _segment_distance_field(h, w, pos[i, 0], pos[i, 1], pos[j, 0], pos[j, 1], reach)
        out[ys, xs] = 1.0
    return Raster(out)


def dilate(raster: Raster, radius: float) -> Raster:
    """Dilation by a Euclidean disk: output 1 iff any input 1 within `radius`."""
    if radius < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {radius}")
    binary = raster.data > 0
    if radius == 0 or not binary.any():
        return Raster(binary.astype(np.float32))
    # Distance of every pixel to the nearest foreground pixel; threshold at the
    # radius. Exact Euclidean, unlike iterated structuring-element dilation.
    dist = ndimage.distance_transform_edt(~binary)
    return Raster((dist <= radius).astype(np.float32))


def distance_transform(points: list[PromptPoint], h: int, w: int) -> Raster:
    """Per-pixel min Euclidean distance to any prompt point, normalized by the
    image diagonal to [0, 1]. Exact for sub-pixel point positions.
    """
    if not points:
        raise ValidationError("distance transform needs at least one point")
    px = np.array([p.x for p in points], dtype=np.float64)
    py = np.array([p.y for p in points], dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    best = np.full((h, w), np.inf, dtype=np.float64)
    # One point at a time keeps memory at O(HW) regardless of prompt count.
    for k in range(len(points)):
        d2 = (ys[:, None] - py[k]) ** 2 + (xs[None, :] - px[k]) ** 2
        np.minimum(best, d2, out=best)
    diag = float(np.hypot(h - 1, w - 1)) if (h > 1 or w > 1) else 1.0
    return Raster((np.sqrt(best) / diag).astype(np.float32))


def blend_weight_profile(patch: int, overlap: int) -> np.ndarray:
    """Separable 1-D blend weight: linear ramp over the overlap, 1 inside.

    Strictly positive everywhere so single-coverage pixels renormalize to the
    raw patch value.
    """
    u = np.arange(patch, dtype=np.float64)
    ramp_in = (u + 1.0) / (overlap + 1.0)
    ramp_out = (patch - u) / (overlap + 1.0)
    return np.minimum(1.0, np.minimum(ramp_in, ramp_out))


def blend_patches(patches: list[tuple[tuple[int, int], Raster]], layout: PatchLayout) -> Raster:
    """Weighted-average stitch of patch rasters into the global frame.

    Weights are the separable tent profile, renormalized per pixel. Pixels
    covered by exactly one patch take that patch's value bit-exactly; pixels
    with no coverage are 0.
    """
    p = layout.patch
    h, w = layout.image_h, layout.image_w
    acc = np.zeros((h, w), dtype=np.float64)
    wacc = np.zeros_like(acc)
    count = np.zeros((h, w), dtype=np.int32)
    raw = np.zeros((h, w), dtype=np.float32)
    prof = blend_weight_profile(p, layout.overlap)
    weight = prof[:, None] * prof[None, :]
    for (ox, oy), raster in patches:
        if raster.shape != (p, p):
            raise ValidationError(f"patch at {(ox, oy)} has shape {raster.shape}, expected {(p, p)}")
        # Patches may stick out when the image is smaller than one patch.
        ph = min(oy + p, h) - oy
        pw = min(ox + p, w) - ox
        win = (slice(oy, oy + ph), slice(ox, ox + pw))
        acc[win] += weight[:ph, :pw] * raster.data[:ph, :pw].astype(np.float64)
        wacc[win] += weight[:ph, :pw]
        count[win] += 1
        raw[win] = raster.data[:ph, :pw]
    out = np.zeros((h, w), dtype=np.float32)
    multi = count > 1
    out[multi] = (acc[multi] / wacc[multi]).astype(np.float32)
    single = count == 1
    out[single] = raw[single]
    return Raster(out)
