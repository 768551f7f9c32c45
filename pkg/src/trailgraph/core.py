"""Core domain types shared by every pipeline stage.

Coordinate convention: x grows right, y grows down, pixel centers at integer
coordinates. Sub-pixel vertex positions are allowed everywhere. Persisted
artifacts are float32; internal math may use float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


class FormatError(ValueError):
    """Raised when a serialized artifact cannot be parsed."""


@dataclass(frozen=True)
class Vertex:
    x: float
    y: float
    score: float = 1.0
    is_keypoint: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.score)):
            raise ValidationError(f"non-finite vertex ({self.x}, {self.y}, score={self.score})")


@dataclass(frozen=True)
class RoadGraph:
    """Undirected graph over pixel-space vertices.

    Edges are stored canonically as (i, j) with i < j, sorted, deduplicated.
    """

    vertices: tuple[Vertex, ...]
    edges: tuple[tuple[int, int], ...]

    @staticmethod
    def make(vertices: Iterable[Vertex], edges: Iterable[tuple[int, int]]) -> "RoadGraph":
        """Build a validated, canonical graph; rejects self-loops, duplicates, bad indices."""
        verts = tuple(vertices)
        n = len(verts)
        canon: list[tuple[int, int]] = []
        seen: set[tuple[int, int]] = set()
        for k, (i, j) in enumerate(edges):
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-loop at edge {k}: ({i}, {j})")
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"index out of range at edge {k}: ({i}, {j}) with {n} vertices")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError(f"duplicate edge at position {k}: {key}")
            seen.add(key)
            canon.append(key)
        canon.sort()
        return RoadGraph(verts, tuple(canon))

    @staticmethod
    def empty() -> "RoadGraph":
        return RoadGraph((), ())

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self.vertices), dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def positions(self) -> np.ndarray:
        """(n, 2) float64 array of (x, y) positions."""
        if not self.vertices:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([(v.x, v.y) for v in self.vertices], dtype=np.float64)

    def edge_lengths(self) -> np.ndarray:
        pos = self.positions()
        if not self.edges:
            return np.zeros(0, dtype=np.float64)
        e = np.asarray(self.edges, dtype=np.int64)
        return np.linalg.norm(pos[e[:, 0]] - pos[e[:, 1]], axis=1)

    def total_length(self) -> float:
        return float(self.edge_lengths().sum())

    def adjacency(self) -> list[list[tuple[int, float]]]:
        """Adjacency list with Euclidean edge weights."""
        pos = self.positions()
        adj: list[list[tuple[int, float]]] = [[] for _ in self.vertices]
        for i, j in self.edges:
            w = float(np.hypot(pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1]))
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj

    def translate(self, dx: float, dy: float) -> "RoadGraph":
        moved = tuple(replace(v, x=v.x + dx, y=v.y + dy) for v in self.vertices)
        return RoadGraph(moved, self.edges)


@dataclass(frozen=True)
class Raster:
    """H x W float32 grid; probability rasters hold values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"raster must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @staticmethod
    def zeros(height: int, width: int) -> "Raster":
        return Raster(np.zeros((height, width), dtype=np.float32))

    @staticmethod
    def from_array(arr: np.ndarray, clamp: bool = False) -> "Raster":
        a = np.asarray(arr, dtype=np.float32)
        if clamp:
            a = np.clip(a, 0.0, 1.0)
        return Raster(a)


@dataclass(frozen=True)
class PatchLayout:
    """Tiling geometry mapping global and patch coordinates.

    Origins are chosen so every pixel is covered; the last row/column of
    patches is clamped to end exactly at the image border.
    """

    image_w: int
    image_h: int
    patch: int = 1024
    stride: int = 768

    def __post_init__(self):
        if self.patch <= 0 or self.stride <= 0:
            raise ValidationError("patch and stride must be positive")
        if self.stride > self.patch:
            raise ValidationError(f"stride {self.stride} exceeds patch {self.patch}")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValidationError("image dimensions must be positive")

    @property
    def overlap(self) -> int:
        return self.patch - self.stride

    def _axis_origins(self, extent: int) -> list[int]:
        if extent <= self.patch:
            return [0]
        origins = list(range(0, extent - self.patch, self.stride))
        origins.append(extent - self.patch)
        return origins

    def origins(self) -> list[tuple[int, int]]:
        """Sorted (x, y) patch origins covering the image."""
        xs = self._axis_origins(self.image_w)
        ys = self._axis_origins(self.image_h)
        return [(x, y) for y in ys for x in xs]

    def patches_containing(self, x: float, y: float) -> list[tuple[int, int]]:
        """All patch origins whose extent contains the point."""
        out = []
        for ox, oy in self.origins():
            if ox <= x < ox + self.patch and oy <= y < oy + self.patch:
                out.append((ox, oy))
        return out


@dataclass(frozen=True)
class PromptPoint:
    x: float
    y: float
    polarity: str  # "positive" | "negative"

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValidationError(f"bad polarity {self.polarity!r}")

    @property
    def positive(self) -> bool:
        return self.polarity == "positive"


# Tensor names of the scoring head, in serialization order. d refers to the
# hidden width; the MLP bottleneck is fixed at 64.
HEAD_TENSOR_SHAPES: tuple[tuple[str, tuple], ...] = (
    ("proj.weight", ("in", "d")),
    ("proj.bias", ("d",)),
    ("attn.q.weight", ("d", "d")),
    ("attn.q.bias", ("d",)),
    ("attn.k.weight", ("d", "d")),
    ("attn.k.bias", ("d",)),
    ("attn.v.weight", ("d", "d")),
    ("attn.v.bias", ("d",)),
    ("attn.out.weight", ("d", "d")),
    ("attn.out.bias", ("d",)),
    ("lambda_comp", (1,)),
    ("mlp.fc1.weight", ("d", 64)),
    ("mlp.fc1.bias", (64,)),
    ("mlp.fc2.weight", (64, 1)),
    ("mlp.fc2.bias", (1,)),
    ("heads", (1,)),
)

FEATURE_DIM = 20  # 11 geometric + 9 path features


@dataclass
class HeadWeights:
    """All parameters of the edge-scoring head as named float32 tensors."""

    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, _ in HEAD_TENSOR_SHAPES:
            if name not in self.tensors:
                raise ValidationError(f"missing tensor {name!r}")
        d = int(self.tensors["proj.weight"].shape[1])
        heads = int(round(float(self.tensors["heads"][0])))
        if heads < 1 or d % heads != 0:
            raise ValidationError(f"hidden dim {d} not divisible by heads {heads}")
        for name, spec_shape in HEAD_TENSOR_SHAPES:
            t = self.tensors[name]
            expect = tuple(
                d if s == "d" else (FEATURE_DIM if s == "in" else s) for s in spec_shape
            )
            if tuple(t.shape) != expect:
                raise ValidationError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {expect}")
            if t.dtype != np.float32:
                self.tensors[name] = t.astype(np.float32)
            if not np.all(np.isfinite(self.tensors[name])):
                raise ValidationError(f"tensor {name!r} has non-finite values")

    @property
    def hidden_dim(self) -> int:
        return int(self.tensors["proj.weight"].shape[1])

    @property
    def num_heads(self) -> int:
        return int(round(float(self.tensors["heads"][0])))

    @property
    def lambda_comp(self) -> float:
        return float(self.tensors["lambda_comp"][0])

    def copy(self) -> "HeadWeights":
        return HeadWeights({k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class ExtractionConfig:
    """Knobs of the mask-to-graph pipeline.

    Defaults follow the wild-terrain profile (search radius 200 px, pooling
    kernels {3, 9, 15}); use `urban()` for the dense-scene profile.
    """

    nms_radius: float = 8.0
    pair_radius: float = 200.0
    pool_kernels: tuple[int, ...] = (3, 9, 15)
    num_samples: int = 32
    temperature: float = 5.0
    keypoint_boost: float = 0.9
    mask_threshold: float = 0.5
    edge_threshold: float = 0.5
    k_max: int = 16

    def __post_init__(self):
        if self.nms_radius <= 0 or self.pair_radius <= 0:
            raise ValidationError("radii must be positive")
        if self.num_samples < 2:
            raise ValidationError("num_samples must be >= 2")
        if self.temperature <= 0 or self.keypoint_boost <= 0:
            raise ValidationError("temperature and keypoint_boost must be positive")
        ks = tuple(int(k) for k in self.pool_kernels)
        if not ks or any(k < 1 or k % 2 == 0 for k in ks) or list(ks) != sorted(ks):
            raise ValidationError(f"pool_kernels must be odd and ascending, got {ks}")
        object.__setattr__(self, "pool_kernels", ks)

    @staticmethod
    def urban() -> "ExtractionConfig":
        return ExtractionConfig(pair_radius=64.0, pool_kernels=(1, 5, 9))

    def to_dict(self) -> dict:
        return {
            "nms_radius": self.nms_radius,
            "pair_radius": self.pair_radius,
            "pool_kernels": list(self.pool_kernels),
            "num_samples": self.num_samples,
            "temperature": self.temperature,
            "keypoint_boost": self.keypoint_boost,
            "mask_threshold": self.mask_threshold,
            "edge_threshold": self.edge_threshold,
            "k_max": self.k_max,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExtractionConfig":
        known = {f for f in ExtractionConfig.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "pool_kernels" in kwargs:
            kwargs["pool_kernels"] = tuple(kwargs["pool_kernels"])
        return ExtractionConfig(**kwargs)
