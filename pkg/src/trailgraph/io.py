"""Bit-exact readers and writers for rasters, graphs, and head weights.

Formats:
  RPM1 raster    bytes "RPM1", u32 LE height, u32 LE width, h*w float32 LE row-major
  graph JSON     {"vertices": [[x, y], ...], "edges": [[i, j], ...], "scores": [...]}
  weights file   u32 LE header length, JSON header {"tensors": [{"name", "shape"}, ...]},
                 concatenated float32 LE payloads in header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import FormatError, HeadWeights, Raster, RoadGraph, ValidationError, Vertex

RPM_MAGIC = b"RPM1"
MAX_DIM = 1 << 20  # sanity bound on raster dimensions


def write_raster(raster: Raster, path: str | Path) -> None:
    payload = np.ascontiguousarray(raster.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(RPM_MAGIC)
        f.write(struct.pack("<II", raster.height, raster.width))
        f.write(payload)


def raster_to_bytes(raster: Raster) -> bytes:
    return (
        RPM_MAGIC
        + struct.pack("<II", raster.height, raster.width)
        + np.ascontiguousarray(raster.data, dtype="<f4").tobytes()
    )


def raster_from_bytes(blob: bytes) -> Raster:
    if len(blob) < 12:
        raise FormatError("raster truncated: missing header")
    if blob[:4] != RPM_MAGIC:
        raise FormatError(f"bad raster magic {blob[:4]!r}")
    h, w = struct.unpack("<II", blob[4:12])
    if h > MAX_DIM or w > MAX_DIM:
        raise FormatError(f"raster dimensions {h}x{w} exceed limit")
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise FormatError(f"raster payload is {len(blob) - 12} bytes, expected {4 * h * w}")
    data = np.frombuffer(blob[12:], dtype="<f4").reshape(h, w).copy()
    return Raster(data)


def read_raster(path: str | Path) -> Raster:
    return raster_from_bytes(Path(path).read_bytes())


def graph_to_dict(graph: RoadGraph) -> dict:
    return {
        "vertices": [[float(v.x), float(v.y)] for v in graph.vertices],
        "edges": [[int(i), int(j)] for i, j in graph.edges],
        "scores": [float(v.score) for v in graph.vertices],
    }


def graph_from_dict(doc: dict) -> RoadGraph:
    if not isinstance(doc, dict) or "vertices" not in doc or "edges" not in doc:
        raise FormatError("graph document must contain 'vertices' and 'edges'")
    scores = doc.get("scores")
    verts = []
    for k, xy in enumerate(doc["vertices"]):
        if len(xy) != 2:
            raise FormatError(f"vertex {k} is not an [x, y] pair")
        s = float(scores[k]) if scores is not None else 1.0
        verts.append(Vertex(float(xy[0]), float(xy[1]), score=s))
    try:
        return RoadGraph.make(verts, [(int(e[0]), int(e[1])) for e in doc["edges"]])
    except (TypeError, IndexError) as e:
        raise FormatError(f"malformed edge list: {e}") from e


def write_graph(graph: RoadGraph, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(graph_to_dict(graph), f)
        f.write("\n")


def read_graph(path: str | Path) -> RoadGraph:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"graph {path} is not valid JSON: {e}") from e
    return graph_from_dict(doc)


def weights_to_bytes(weights: HeadWeights) -> bytes:
    names = list(weights.tensors)
    header = json.dumps(
        {"tensors": [{"name": n, "shape": list(weights.tensors[n].shape)} for n in names]}
    ).encode()
    chunks = [struct.pack("<I", len(header)), header]
    for n in names:
        chunks.append(np.ascontiguousarray(weights.tensors[n], dtype="<f4").tobytes())
    return b"".join(chunks)


def weights_from_bytes(blob: bytes) -> HeadWeights:
    if len(blob) < 4:
        raise FormatError("weights file truncated: missing header length")
    (hlen,) = struct.unpack("<I", blob[:4])
    if 4 + hlen > len(blob):
        raise FormatError("weights file truncated: header overruns file")
    try:
        header = json.loads(blob[4 : 4 + hlen])
    except json.JSONDecodeError as e:
        raise FormatError(f"weights header is not valid JSON: {e}") from e
    if "tensors" not in header:
        raise FormatError("weights header missing 'tensors'")
    tensors: dict[str, np.ndarray] = {}
    offset = 4 + hlen
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"weights payload truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after tensor payloads")
    try:
        return HeadWeights(tensors)
    except ValidationError as e:
        raise FormatError(str(e)) from e


def write_weights(weights: HeadWeights, path: str | Path) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def read_weights(path: str | Path) -> HeadWeights:
    return weights_from_bytes(Path(path).read_bytes())
