"""HTTP service backing the interactive parameter tuner.

One model per process.  Each session holds a decoded input image, its edge
map, and (in cheap mode) one activation cache per operator; caches die with
the session.  Per-session operations are serialized by a session lock while
distinct sessions run concurrently against the shared read-only model.
"""

from __future__ import annotations

import base64
import threading
import time
import uuid
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse

from .autodiff import Tensor
from .basenet import forward_base, stage_plan
from .checkpoint import LoadedCheckpoint, load_checkpoint
from .errors import ParameterError
from .hypernet import SINGLE_LAYER_MODES, build_cache, cached_forward, predict_weights
from .imaging import decode_png_bytes, encode_png_bytes
from .operators import edge_map, normalize_gamma, operator_specs

MAX_SIDE = 2048


class Session:
    def __init__(self, image: np.ndarray):
        self.image = image
        self.edge = edge_map(image)
        self.caches: dict[str, object] = {}
        self.lock = threading.Lock()
        self.image_t = Tensor(image.transpose(2, 0, 1)[None].astype(np.float32))
        self.edge_t = Tensor(self.edge[None].astype(np.float32))


class ServerState:
    def __init__(self, ckpt: Optional[LoadedCheckpoint]):
        self.ckpt = ckpt
        self.sessions: dict[str, Session] = {}
        self.sessions_lock = threading.Lock()

    def specs(self):
        if self.ckpt is not None:
            specs = self.ckpt.operator_specs()
            if specs:
                return specs
        return operator_specs()


def _spec_payload(spec) -> dict:
    return {
        "name": spec.name,
        "operator_id": spec.operator_id,
        "kind": spec.kind,
        "params": [
            {"name": n, "lo": r[0], "hi": r[1], "space": s}
            for n, r, s in zip(spec.param_names, spec.ranges, spec.spaces)
        ],
    }


def _error(status: int, code: str, **extra):
    return JSONResponse({"error": code, **extra}, status_code=status)


def create_app(model_path: Optional[str] = None, static_dir: Optional[str] = None, ckpt: Optional[LoadedCheckpoint] = None) -> FastAPI:
    if ckpt is None and model_path is not None:
        ckpt = load_checkpoint(model_path)
    state = ServerState(ckpt)
    app = FastAPI(title="paramop tuner")
    app.state.paramop = state

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz():
        return "ok"

    @app.get("/api/operators")
    def operators():
        return [_spec_payload(s) for s in state.specs()]

    @app.post("/api/session")
    async def create_session(request: Request):
        if state.ckpt is None:
            return _error(503, "model_not_loaded")
        try:
            body = await request.json()
            payload = base64.b64decode(body["image"])
            image = decode_png_bytes(payload)
        except Exception:
            return _error(400, "malformed_body")
        h, w = image.shape[:2]
        if h > MAX_SIDE or w > MAX_SIDE:
            return _error(400, "image_too_large", max_side=MAX_SIDE)
        if h % 2 or w % 2:
            return _error(400, "odd_image_size")
        sid = uuid.uuid4().hex
        with state.sessions_lock:
            state.sessions[sid] = Session(image)
        return {"session_id": sid}

    @app.delete("/api/session/{sid}")
    def delete_session(sid: str):
        with state.sessions_lock:
            existed = state.sessions.pop(sid, None)
        if existed is None:
            return _error(404, "unknown_session")
        return Response(status_code=204)

    @app.post("/api/session/{sid}/apply")
    async def apply(sid: str, request: Request):
        if state.ckpt is None:
            return _error(503, "model_not_loaded")
        with state.sessions_lock:
            session = state.sessions.get(sid)
        if session is None:
            return _error(404, "unknown_session")
        try:
            body = await request.json()
            op_name = body["operator"]
            raw = [float(v) for v in body["gamma"]]
            mode = body.get("mode", "full")
        except Exception:
            return _error(400, "malformed_body")
        if mode not in ("full", "cheap"):
            return _error(400, "unknown_mode")
        spec = next((s for s in state.specs() if s.name == op_name), None)
        if spec is None:
            return _error(400, "unknown_operator", operator=op_name)
        if len(raw) != len(spec.param_names):
            return _error(400, "gamma_arity", expected=len(spec.param_names))
        for name, value, (lo, hi) in zip(spec.param_names, raw, spec.ranges):
            if not lo <= value <= hi:
                return _error(400, "gamma_out_of_range", param=name, lo=lo, hi=hi, value=value)
        ckpt = state.ckpt
        try:
            gamma = normalize_gamma(spec, raw, include_id=ckpt.joint)
        except ParameterError:
            return _error(400, "gamma_out_of_range", param=spec.param_names[0])
        if gamma.shape[0] < ckpt.gamma_dim:
            gamma = np.concatenate([gamma, np.zeros(ckpt.gamma_dim - gamma.shape[0])])
        if mode == "cheap" and ckpt.net.slot_spec.mode not in SINGLE_LAYER_MODES:
            return _error(400, "cheap_mode_unavailable", slot_mode=ckpt.net.slot_spec.mode)

        with session.lock:
            start = time.perf_counter()
            if mode == "cheap":
                cache = session.caches.get(op_name)
                if cache is None:
                    cache = build_cache(ckpt.base, ckpt.net, session.image_t, session.edge_t)
                    session.caches[op_name] = cache
                out, recomputed = cached_forward(ckpt.base, ckpt.net, cache, gamma)
            else:
                out = forward_base(ckpt.base, predict_weights(ckpt.net, gamma), session.image_t, session.edge_t)
                recomputed = sum(1 for kind, _ in stage_plan(ckpt.base) if kind in ("conv", "norm"))
            latency_ms = (time.perf_counter() - start) * 1000.0
            pred = np.clip(out.data[0].transpose(1, 2, 0).astype(np.float64), 0.0, 1.0)
        return {
            "image": base64.b64encode(encode_png_bytes(pred)).decode("ascii"),
            "latency_ms": latency_ms,
            "layers_recomputed": recomputed,
            "mode": mode,
        }

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
