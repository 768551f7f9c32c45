"""Candidate edge generation and per-edge feature extraction.

Each candidate edge gets two feature blocks:
  geometric (11-d): endpoint offsets and distance normalized by the pairing
    radius, plus the bearing angle as 4-term Fourier features.
  path (3 per scale, 9-d at 3 scales): mean, population std, and softmin of
    road probabilities sampled along the straight segment between endpoints,
    once per pooling scale.

The softmin, -(1/tau) * log sum exp(-tau * (1 - P_i)), sits within
[min(1-P) - ln(N)/tau, min(1-P)] and flags the worst point on the path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import Raster, ValidationError, Vertex
from .rasterops import bilinear_sample_many, box_filter


@dataclass(frozen=True)
class PathStats:
    mean: float
    std: float
    softmin: float


@dataclass
class CandidateEdge:
    src: int
    dst: int
    f_geo: np.ndarray = field(default_factory=lambda: np.zeros(11))
    f_path: np.ndarray = field(default_factory=lambda: np.zeros(9))
    score: float = 0.0

    def feature_vector(self) -> np.ndarray:
        return np.concatenate([self.f_geo, self.f_path])


def pair_candidates(
    vertices: list[Vertex], r: float, k_max: int = 16
) -> list[tuple[int, int]]:
    """Up to k_max nearest neighbors within radius r per vertex, deduplicated
    as (i, j) with i < j, sorted."""
    if r <= 0:
        raise ValidationError(f"pairing radius must be positive, got {r}")
    if k_max < 1:
        raise ValidationError(f"k_max must be >= 1, got {k_max}")
    n = len(vertices)
    if n < 2:
        return []
    pos = np.array([(v.x, v.y) for v in vertices], dtype=np.float64)
    tree = cKDTree(pos)
    k = min(k_max + 1, n)  # +1: the query point itself comes back first
    dists, idxs = tree.query(pos, k=k, distance_upper_bound=r)
    pairs: set[tuple[int, int]] = set()
    for i in range(n):
        for d, j in zip(np.atleast_1d(dists[i]), np.atleast_1d(idxs[i])):
            if j == n or j == i or not np.isfinite(d):
                continue
            pairs.add((min(i, int(j)), max(i, int(j))))
    return sorted(pairs)


def build_pyramid(road: Raster, kernels: tuple[int, ...]) -> list[Raster]:
    """Box-filtered copies of the road mask, one per kernel size."""
    return [box_filter(road, k) for k in kernels]


def sample_positions(s: tuple[float, float], t: tuple[float, float], n: int) -> np.ndarray:
    """n points uniformly spaced on segment s->t, endpoints included. (n, 2)."""
    frac = np.linspace(0.0, 1.0, n)
    return np.stack(
        [s[0] + frac * (t[0] - s[0]), s[1] + frac * (t[1] - s[1])], axis=1
    )


def path_stats_from_samples(probs: np.ndarray, tau: float) -> PathStats:
    probs = np.asarray(probs, dtype=np.float64)
    mean = float(probs.mean())
    std = float(np.sqrt(np.mean((probs - mean) ** 2)))
    cost = 1.0 - probs
    # logsumexp with max shift for stability
    m = np.max(-tau * cost)
    softmin = float(-(m + np.log(np.sum(np.exp(-tau * cost - m)))) / tau)
    return PathStats(mean, std, softmin)


def path_features_from_pyramid(
    pyramid: list[Raster],
    s: tuple[float, float],
    t: tuple[float, float],
    n_samples: int = 32,
    tau: float = 5.0,
) -> np.ndarray:
    """Scale-major concatenation of (mean, std, softmin) per pyramid level."""
    if s == t:
        raise ValidationError("zero-length edge")
    pts = sample_positions(s, t, n_samples)
    out = np.empty(3 * len(pyramid), dtype=np.float64)
    for ell, level in enumerate(pyramid):
        probs = bilinear_sample_many(level, pts[:, 0], pts[:, 1])
        st = path_stats_from_samples(probs, tau)
        out[3 * ell : 3 * ell + 3] = (st.mean, st.std, st.softmin)
    return out


def path_features(
    road: Raster,
    kernels: tuple[int, ...],
    s: tuple[float, float],
    t: tuple[float, float],
    n_samples: int = 32,
    tau: float = 5.0,
) -> np.ndarray:
    return path_features_from_pyramid(build_pyramid(road, kernels), s, t, n_samples, tau)


def geometric_features(
    s: tuple[float, float], t: tuple[float, float], r: float
) -> np.ndarray:
    """[dx/r, dy/r, d/r, sin(m*theta), cos(m*theta) for m=1..4], 11 values."""
    if s == t:
        raise ValidationError("zero-length edge")
    dx = t[0] - s[0]
    dy = t[1] - s[1]
    d = float(np.hypot(dx, dy))
    theta = float(np.arctan2(dy, dx))
    out = np.empty(11, dtype=np.float64)
    out[0] = np.clip(dx / r, -1.0, 1.0)
    out[1] = np.clip(dy / r, -1.0, 1.0)
    out[2] = np.clip(d / r, 0.0, 1.0)
    for m in range(1, 5):
        out[1 + 2 * m] = np.sin(m * theta)
        out[2 + 2 * m] = np.cos(m * theta)
    return out


def extract_edge_features(
    road: Raster,
    vertices: list[Vertex],
    pairs: list[tuple[int, int]],
    kernels: tuple[int, ...],
    r: float,
    n_samples: int = 32,
    tau: float = 5.0,
) -> list[CandidateEdge]:
    """Feature-complete candidate edges for a batch of vertex pairs.

    The pyramid is built once and shared across all edges.
    """
    pyramid = build_pyramid(road, kernels)
    edges = []
    for i, j in pairs:
        s = (vertices[i].x, vertices[i].y)
        t = (vertices[j].x, vertices[j].y)
        edges.append(
            CandidateEdge(
                src=i,
                dst=j,
                f_geo=geometric_features(s, t, r),
                f_path=path_features_from_pyramid(pyramid, s, t, n_samples, tau),
            )
        )
    return edges
