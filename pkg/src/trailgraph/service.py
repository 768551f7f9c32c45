"""Prompt-Propose-Refine annotation service.

Sessions hold an image layout, prompt set, and the working graph. Mutations
are serialized per session and bump a revision counter; edits carry the
revision they were based on and are rejected on mismatch (optimistic
concurrency, matching UI retry behavior). Auto-run proposes a graph from the
prompts via tiled extraction and swaps it in atomically.

Edit semantics: ops apply in order, each seeing the previous op's result;
delete_vertex removes incident edges and shifts higher vertex ids down by one.
"""
from __future__ import annotations

import json
import os
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from .assembly import (
    MaskProvider,
    ProviderError,
    RemoteProvider,
    SyntheticProvider,
    TileDirectoryProvider,
    extract_graph_tiled,
)
from .core import (
    ExtractionConfig,
    PatchLayout,
    PromptPoint,
    RoadGraph,
    ValidationError,
    Vertex,
)
from .head import init_weights
from .io import graph_from_dict, graph_to_dict, raster_to_bytes, read_weights

RASTER_CACHE_CAPACITY = 64


class ImageMeta(BaseModel):
    width: int
    height: int


class CreateSessionRequest(BaseModel):
    image: ImageMeta
    provider: dict
    patch: int = 1024
    stride: int = 768
    config: dict = {}
    weights_path: Optional[str] = None


class PromptModel(BaseModel):
    x: float
    y: float
    polarity: Literal["positive", "negative"]


class PromptsRequest(BaseModel):
    prompts: list[PromptModel]


class AutoRunRequest(BaseModel):
    config: dict = {}
    weights_path: Optional[str] = None


class EditOpModel(BaseModel):
    op: Literal["add_vertex", "move_vertex", "delete_vertex", "add_edge", "delete_edge"]
    x: Optional[float] = None
    y: Optional[float] = None
    id: Optional[int] = None
    i: Optional[int] = None
    j: Optional[int] = None


class EditsRequest(BaseModel):
    base_revision: int
    ops: list[EditOpModel]


class SaveRequest(BaseModel):
    path: str


class LoadRequest(BaseModel):
    path: str


@dataclass
class Session:
    id: str
    layout: PatchLayout
    provider_config: dict
    provider: MaskProvider
    config: ExtractionConfig
    weights_path: Optional[str]
    prompts: list[PromptPoint] = field(default_factory=list)
    graph: RoadGraph = field(default_factory=RoadGraph.empty)
    revision: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


def build_provider(config: dict, patch: int) -> MaskProvider:
    kind = config.get("kind")
    if kind == "synthetic":
        if "graph" in config:
            gt = graph_from_dict(config["graph"])
        elif "graph_path" in config:
            from .io import read_graph

            gt = read_graph(config["graph_path"])
        else:
            raise ValidationError("synthetic provider needs 'graph' or 'graph_path'")
        return SyntheticProvider(
            gt,
            patch=patch,
            noise_sigma=float(config.get("noise_sigma", 0.0)),
            thickness=float(config.get("thickness", 5.0)),
            seed=int(config.get("seed", 0)),
        )
    if kind == "tiles":
        d = Path(config.get("dir", ""))
        if not d.is_dir():
            raise ValidationError(f"tiles directory {d} does not exist")
        return TileDirectoryProvider(d, patch=patch)
    if kind == "remote":
        url = config.get("url", "")
        if not url.startswith(("http://", "https://")):
            raise ValidationError(f"remote provider needs an http(s) url, got {url!r}")
        return RemoteProvider(url, patch=patch)
    raise ValidationError(f"unknown provider kind {kind!r}")


def apply_edit_ops(graph: RoadGraph, ops: list[EditOpModel]) -> RoadGraph:
    """Apply ops in order on scratch state; raises with the offending position."""
    verts = list(graph.vertices)
    edges = set(graph.edges)
    for pos, op in enumerate(ops):
        try:
            if op.op == "add_vertex":
                verts.append(Vertex(float(op.x), float(op.y)))
            elif op.op == "move_vertex":
                if op.id is None or not (0 <= op.id < len(verts)):
                    raise ValidationError(f"vertex id {op.id} out of range")
                old = verts[op.id]
                verts[op.id] = Vertex(float(op.x), float(op.y), old.score, old.is_keypoint)
            elif op.op == "delete_vertex":
                k = op.id
                if k is None or not (0 <= k < len(verts)):
                    raise ValidationError(f"vertex id {k} out of range")
                verts.pop(k)
                edges = {
                    (i - (i > k), j - (j > k))
                    for i, j in edges
                    if i != k and j != k
                }
            elif op.op == "add_edge":
                i, j = op.i, op.j
                if i is None or j is None or i == j:
                    raise ValidationError(f"bad edge ({i}, {j})")
                if not (0 <= i < len(verts) and 0 <= j < len(verts)):
                    raise ValidationError(f"edge ({i}, {j}) references missing vertex")
                edges.add((min(i, j), max(i, j)))
            elif op.op == "delete_edge":
                key = (min(op.i, op.j), max(op.i, op.j))
                if key not in edges:
                    raise ValidationError(f"edge {key} not present")
                edges.remove(key)
        except (ValidationError, TypeError) as e:
            raise ValidationError(f"op {pos} ({op.op}): {e}") from e
    return RoadGraph.make(verts, sorted(edges))


class ServiceState:
    def __init__(self, default_weights_path: Optional[str] = None):
        self.sessions: dict[str, Session] = {}
        self.store_lock = threading.Lock()
        self.default_weights_path = default_weights_path
        self._raster_cache: OrderedDict[tuple, tuple] = OrderedDict()
        self._cache_lock = threading.Lock()
        self._weights_cache: dict[str, object] = {}

    def get_session(self, sid: str) -> Session:
        with self.store_lock:
            sess = self.sessions.get(sid)
        if sess is None:
            raise HTTPException(404, f"unknown session {sid}")
        return sess

    def masks_cached(self, sess: Session, origin: tuple[int, int]):
        key = (sess.id, origin)
        with self._cache_lock:
            if key in self._raster_cache:
                self._raster_cache.move_to_end(key)
                return self._raster_cache[key]
        masks = sess.provider.masks(origin)
        with self._cache_lock:
            self._raster_cache[key] = masks
            self._raster_cache.move_to_end(key)
            while len(self._raster_cache) > RASTER_CACHE_CAPACITY:
                self._raster_cache.popitem(last=False)
        return masks

    def load_weights(self, path: Optional[str]):
        if path is None:
            raise HTTPException(400, "no weights configured; set weights_path or TRAILGRAPH_WEIGHTS")
        if path == ":random:":
            return init_weights(0)
        if path not in self._weights_cache:
            try:
                self._weights_cache[path] = read_weights(path)
            except Exception as e:
                raise HTTPException(400, f"cannot load weights {path}: {e}") from e
        return self._weights_cache[path]


class _CachingProvider(MaskProvider):
    """Routes a session's mask fetches through the service LRU cache."""

    def __init__(self, state: ServiceState, sess: Session):
        self.state = state
        self.sess = sess
        self.patch = sess.provider.patch

    def masks(self, origin):
        return self.state.masks_cached(self.sess, origin)


def session_bundle(sess: Session) -> dict:
    return {
        "image": {"width": sess.layout.image_w, "height": sess.layout.image_h},
        "patch": sess.layout.patch,
        "stride": sess.layout.stride,
        "provider": sess.provider_config,
        "config": sess.config.to_dict(),
        "weights_path": sess.weights_path,
        "prompts": [[p.x, p.y, p.polarity] for p in sess.prompts],
        "graph": graph_to_dict(sess.graph),
        "revision": sess.revision,
    }


def session_from_bundle(doc: dict) -> Session:
    try:
        layout = PatchLayout(
            image_w=int(doc["image"]["width"]),
            image_h=int(doc["image"]["height"]),
            patch=int(doc.get("patch", 1024)),
            stride=int(doc.get("stride", 768)),
        )
        provider = build_provider(doc["provider"], layout.patch)
        sess = Session(
            id=str(uuid.uuid4()),
            layout=layout,
            provider_config=doc["provider"],
            provider=provider,
            config=ExtractionConfig.from_dict(doc.get("config", {})),
            weights_path=doc.get("weights_path"),
            prompts=[PromptPoint(float(x), float(y), pol) for x, y, pol in doc.get("prompts", [])],
            graph=graph_from_dict(doc["graph"]),
            revision=int(doc.get("revision", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed session bundle: {e}") from e
    return sess


def create_app(default_weights_path: Optional[str] = None) -> FastAPI:
    state = ServiceState(
        default_weights_path or os.environ.get("TRAILGRAPH_WEIGHTS") or None
    )
    app = FastAPI(title="trailgraph annotation service")
    app.state.service = state

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        try:
            layout = PatchLayout(req.image.width, req.image.height, req.patch, req.stride)
            provider = build_provider(req.provider, req.patch)
            config = ExtractionConfig.from_dict(req.config)
        except ValidationError as e:
            raise HTTPException(400, str(e)) from e
        sess = Session(
            id=str(uuid.uuid4()),
            layout=layout,
            provider_config=req.provider,
            provider=provider,
            config=config,
            weights_path=req.weights_path or state.default_weights_path,
        )
        with state.store_lock:
            state.sessions[sess.id] = sess
        return {"id": sess.id, "revision": sess.revision}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        sess = state.get_session(sid)
        return {
            "id": sess.id,
            "revision": sess.revision,
            "image": {"width": sess.layout.image_w, "height": sess.layout.image_h},
            "patch": sess.layout.patch,
            "stride": sess.layout.stride,
            "provider_kind": sess.provider_config.get("kind"),
            "num_prompts": len(sess.prompts),
            "graph": {"vertices": sess.graph.num_vertices, "edges": sess.graph.num_edges},
        }

    @app.put("/sessions/{sid}/prompts")
    def set_prompts(sid: str, req: PromptsRequest):
        sess = state.get_session(sid)
        pts = []
        for k, p in enumerate(req.prompts):
            if not (0 <= p.x < sess.layout.image_w and 0 <= p.y < sess.layout.image_h):
                raise HTTPException(422, f"prompt {k} at ({p.x}, {p.y}) outside image")
            pts.append(PromptPoint(p.x, p.y, p.polarity))
        with sess.lock:
            sess.prompts = pts
            sess.revision += 1
            return {"revision": sess.revision}

    @app.post("/sessions/{sid}/auto-run")
    def auto_run(sid: str, req: AutoRunRequest = AutoRunRequest()):
        sess = state.get_session(sid)
        weights = state.load_weights(req.weights_path or sess.weights_path)
        with sess.lock:
            if not any(p.positive for p in sess.prompts):
                raise HTTPException(409, "no prompts: place at least one positive prompt")
            cfg = (
                ExtractionConfig.from_dict({**sess.config.to_dict(), **req.config})
                if req.config
                else sess.config
            )
            t0 = time.perf_counter()
            try:
                proposal = extract_graph_tiled(
                    _CachingProvider(state, sess), sess.layout, weights, cfg, prompts=sess.prompts
                )
            except ProviderError as e:
                raise HTTPException(502, str(e)) from e
            elapsed = time.perf_counter() - t0
            sess.graph = proposal
            sess.revision += 1
            return {
                "revision": sess.revision,
                "graph": graph_to_dict(proposal),
                "timings": {"auto_run_s": elapsed},
            }

    @app.post("/sessions/{sid}/edits")
    def apply_edits(sid: str, req: EditsRequest):
        sess = state.get_session(sid)
        with sess.lock:
            if req.base_revision != sess.revision:
                raise HTTPException(
                    409, f"revision conflict: base {req.base_revision}, current {sess.revision}"
                )
            try:
                new_graph = apply_edit_ops(sess.graph, req.ops)
            except ValidationError as e:
                raise HTTPException(422, str(e)) from e
            sess.graph = new_graph
            sess.revision += 1
            return {"revision": sess.revision}

    @app.get("/sessions/{sid}/graph")
    def get_graph(sid: str):
        sess = state.get_session(sid)
        return {"revision": sess.revision, "graph": graph_to_dict(sess.graph)}

    @app.post("/sessions/{sid}/save")
    def save_session(sid: str, req: SaveRequest):
        sess = state.get_session(sid)
        with sess.lock:
            bundle = session_bundle(sess)
        try:
            Path(req.path).write_text(json.dumps(bundle, indent=1))
        except OSError as e:
            raise HTTPException(500, f"cannot write {req.path}: {e}") from e
        return {"revision": bundle["revision"], "path": req.path}

    @app.post("/sessions/load")
    def load_session(req: LoadRequest):
        try:
            doc = json.loads(Path(req.path).read_text())
            sess = session_from_bundle(doc)
        except OSError as e:
            raise HTTPException(400, f"cannot read {req.path}: {e}") from e
        except (ValidationError, json.JSONDecodeError) as e:
            raise HTTPException(422, f"corrupt session bundle: {e}") from e
        with state.store_lock:
            state.sessions[sess.id] = sess
        return {"id": sess.id, "revision": sess.revision}

    @app.get("/sessions/{sid}/raster")
    def get_raster(sid: str, kind: str, patch: str):
        sess = state.get_session(sid)
        if kind not in ("road", "keypoint"):
            raise HTTPException(422, f"kind must be road or keypoint, got {kind!r}")
        try:
            ox, oy = (int(v) for v in patch.split(","))
        except ValueError as e:
            raise HTTPException(422, f"patch must be 'X,Y', got {patch!r}") from e
        try:
            road, kp = state.masks_cached(sess, (ox, oy))
        except ProviderError as e:
            raise HTTPException(502, str(e)) from e
        raster = road if kind == "road" else kp
        return Response(content=raster_to_bytes(raster), media_type="application/octet-stream")

    return app
