"""JSON inference service: stateless protocol over stateful edit sessions.

Every endpoint delegates to the pipeline library with a client-supplied seed, so
any response can be reproduced by replaying the same request. One checkpoint per
server process; sessions live in a capacity-bounded LRU store.
"""
from __future__ import annotations

import threading
import uuid
from collections import OrderedDict

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .data import DataError, SegmentedCloud
from .pipeline import (
    EditSession,
    PartGenModel,
    edit_transform,
    encode_shape,
    generate,
    interpolate_part,
    load_model,
    mix_parts,
    resample_parts,
)

MAX_RESPONSE_POINTS = 4096


class WireCloud(BaseModel):
    points: list[float]
    labels: list[int]
    m: int


class CreateSessionRequest(BaseModel):
    cloud: WireCloud


class ResampleRequest(BaseModel):
    parts: list[int] = Field(default_factory=list)
    seed: int
    points_per_part: int | None = None


class MixRequest(BaseModel):
    donor_session_ids: list[str] = Field(default_factory=list)
    assignment: dict[str, int]  # part index -> 0 for this session, k+1 for donor k
    seed: int


class InterpolateRequest(BaseModel):
    part: int
    target_session: str
    steps: int = 10
    seed: int


class TransformRequest(BaseModel):
    constraints: dict[str, dict]
    seed: int


class GenerateRequest(BaseModel):
    n: int = 1
    seed: int
    points_per_part: int | None = None


def cloud_to_wire(cloud: SegmentedCloud) -> dict:
    return {
        "points": [float(v) for v in cloud.points.reshape(-1)],
        "labels": [int(v) for v in cloud.labels],
        "m": cloud.m,
    }


def wire_to_cloud(wire: WireCloud, class_id: str) -> SegmentedCloud:
    if len(wire.points) != 3 * len(wire.labels):
        raise DataError("points must hold exactly 3 numbers per label")
    pts = np.asarray(wire.points, dtype=np.float64).reshape(-1, 3)
    return SegmentedCloud(pts, np.asarray(wire.labels, dtype=np.int64), class_id, wire.m)


class SessionStore:
    """LRU map of session id -> EditSession with per-session locks; evicted ids
    answer "gone" rather than "not found"."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._sessions: OrderedDict[str, EditSession] = OrderedDict()
        self._locks: dict[str, threading.Lock] = {}
        self._evicted: set[str] = set()

    def add(self, session: EditSession) -> str:
        sid = uuid.uuid4().hex[:12]
        with self._lock:
            self._sessions[sid] = session
            self._locks[sid] = threading.Lock()
            while len(self._sessions) > self.capacity:
                old, _ = self._sessions.popitem(last=False)
                self._locks.pop(old, None)
                self._evicted.add(old)
        return sid

    def get(self, sid: str):
        with self._lock:
            if sid in self._sessions:
                self._sessions.move_to_end(sid)
                return self._sessions[sid], self._locks[sid]
            if sid in self._evicted:
                raise HTTPException(status_code=410, detail=f"session {sid} evicted")
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")

    def __len__(self):
        with self._lock:
            return len(self._sessions)


def _rng(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _check_budget(n_clouds: int, per_part: int, m: int):
    if per_part <= 0:
        raise HTTPException(status_code=400, detail="points_per_part must be positive")
    if n_clouds * per_part * m > MAX_RESPONSE_POINTS * max(n_clouds, 1):
        raise HTTPException(
            status_code=400,
            detail=f"response budget exceeded: at most {MAX_RESPONSE_POINTS} points per cloud")


def create_app(checkpoint_path=None, model: PartGenModel | None = None,
               max_sessions: int = 64) -> FastAPI:
    app = FastAPI(title="partgen service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    if model is None and checkpoint_path is not None:
        model, _ = load_model(checkpoint_path)
    app.state.model = model
    app.state.store = SessionStore(capacity=max_sessions)

    def require_model() -> PartGenModel:
        if app.state.model is None:
            raise HTTPException(status_code=503, detail="checkpoint loading")
        return app.state.model

    def counts_for(session: EditSession, per_part):
        if per_part is None:
            return [min(c, MAX_RESPONSE_POINTS // max(session.m, 1)) for c in session.points_per_part]
        _check_budget(1, per_part, session.m)
        return per_part

    @app.exception_handler(DataError)
    async def data_error_handler(request, exc):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/meta")
    def meta():
        m = require_model()
        return {
            "class_id": m.spec.class_id,
            "m": m.spec.m,
            "part_names": list(m.spec.part_names),
            "point_budget": m.spec.point_budget,
            "connections": [list(c) for c in m.spec.connections],
            "max_response_points": MAX_RESPONSE_POINTS,
        }

    @app.post("/sessions")
    def create_session(body: CreateSessionRequest):
        model = require_model()
        if body.cloud.m != model.m:
            raise HTTPException(status_code=400,
                                detail=f"cloud has m={body.cloud.m}, model expects {model.m}")
        cloud = wire_to_cloud(body.cloud, model.spec.class_id)
        session = encode_shape(model, cloud)
        sid = app.state.store.add(session)
        return {
            "session_id": sid,
            "parts": list(model.spec.part_names),
            "transforms": [
                {"shift": list(t.shift), "scale": list(t.scale), "present": p}
                for t, p in zip(session.transforms.transforms, session.transforms.present)
            ],
        }

    @app.post("/sessions/{sid}/resample")
    def resample(sid: str, body: ResampleRequest):
        model = require_model()
        session, lock = app.state.store.get(sid)
        with lock:
            cloud = resample_parts(model, session, body.parts, _rng(body.seed),
                                   points_per_part=counts_for(session, body.points_per_part))
        return cloud_to_wire(cloud)

    @app.post("/sessions/{sid}/mix")
    def mix(sid: str, body: MixRequest):
        model = require_model()
        session, lock = app.state.store.get(sid)
        donors = [app.state.store.get(d)[0] for d in body.donor_session_ids]
        assignment = {int(j): int(v) for j, v in body.assignment.items()}
        with lock:
            cloud = mix_parts(model, [session] + donors, assignment, _rng(body.seed))
        return cloud_to_wire(cloud)

    @app.post("/sessions/{sid}/interpolate")
    def interpolate(sid: str, body: InterpolateRequest):
        model = require_model()
        session, lock = app.state.store.get(sid)
        target, _ = app.state.store.get(body.target_session)
        if not (0 <= body.part < model.m):
            raise HTTPException(status_code=400, detail=f"invalid part {body.part}")
        if body.steps < 1 or body.steps > 50:
            raise HTTPException(status_code=400, detail="steps must be in [1, 50]")
        z_target = target.latents.z[body.part].clone()
        with lock:
            frames = interpolate_part(model, session, body.part, z_target,
                                      _rng(body.seed), steps=body.steps)
        return {"frames": [cloud_to_wire(f) for f in frames]}

    @app.post("/sessions/{sid}/transform")
    def transform(sid: str, body: TransformRequest):
        model = require_model()
        session, lock = app.state.store.get(sid)
        constraints = {int(j): spec for j, spec in body.constraints.items()}
        with lock:
            result = edit_transform(model, session, constraints, _rng(body.seed))
        wire = cloud_to_wire(result.cloud)
        return {"cloud": wire, "residual": result.residual, "converged": result.converged}

    @app.post("/generate")
    def generate_shapes(body: GenerateRequest):
        model = require_model()
        if body.n < 1 or body.n > 64:
            raise HTTPException(status_code=400, detail="n must be in [1, 64]")
        per_part = body.points_per_part
        if per_part is None:
            per_part = max(8, min(model.spec.point_budget // model.m,
                                  MAX_RESPONSE_POINTS // model.m))
        _check_budget(body.n, per_part, model.m)
        clouds = generate(model, body.n, per_part, _rng(body.seed))
        return {"clouds": [cloud_to_wire(c) for c in clouds]}

    return app
