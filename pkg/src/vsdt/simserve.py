"""Live inference service for interactive tissue-deformation sessions.

A session pairs a mesh with one engine — a trained surrogate fed through
its sliding force window, or the explicit reference solver sub-stepping
to its stability limit — and turns incoming force frames into
displacement fields.

Wire protocol (units: N, mm, mm^3, s):

* ``POST /sessions`` creates a session from a JSON config and returns
  its id,
* ``GET /sessions/{id}/mesh`` describes the lattice for rendering,
* ``DELETE /sessions/{id}`` drops the session,
* ``WebSocket /sessions/{id}/stream`` carries one JSON document per
  message: client ``{"forces": [{"node": [i, j, k], "f": [fx, fy,
  fz]}]}``, server ``{"u": [...], "dv": x, "latency": s}`` with ``u``
  the displacement field flattened in C order over ``(nx, ny, nz, 3)``.
  Faults come back as ``{"error": msg}`` without advancing the session.

Steps on one session are serialized (a blocked step waits; nothing
interleaves), while separate sessions run concurrently and may share a
checkpoint's read-only parameters.
"""

from __future__ import annotations

import json
import math
import threading
import time
import uuid
from collections import deque

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel
from starlette.concurrency import run_in_threadpool

from .femsim import (
    BodyState,
    ElementInversionError,
    ExplicitSolver,
    Material,
    MaterialError,
    SolverError,
    stable_timestep,
)
from .meshkit import GridMesh, MeshError, build_box_mesh, total_volume
from .surrogate import CheckpointError, forward_window, load_checkpoint


class SessionError(RuntimeError):
    """A step request that the session must reject."""


# ----------------------------------------------------------------------
# engines
# ----------------------------------------------------------------------


class SurrogateEngine:
    """Sliding-window inference around a frozen checkpointed model."""

    kind = "surrogate"

    def __init__(self, model, mesh: GridMesh):
        if model.spec.dims != mesh.dims:
            raise SessionError(
                f"checkpoint dims {model.spec.dims} do not match mesh {mesh.dims}"
            )
        self.model = model
        self.n_t = model.spec.n_t
        zero = np.zeros(mesh.dims + (3,), dtype=np.float32)
        self.window: deque = deque(
            (zero.copy() for _ in range(self.n_t)), maxlen=self.n_t
        )

    def step(self, dense_force: np.ndarray) -> np.ndarray:
        self.window.append(dense_force)
        return forward_window(self.model, np.stack(self.window))


class FemEngine:
    """Reference explicit integration, sub-stepped for stability.

    Each client step advances exactly ``sample_interval`` seconds of
    simulated time under a zero-order hold of the supplied force.
    """

    kind = "fem"

    def __init__(
        self,
        mesh: GridMesh,
        material: Material,
        sample_interval: float,
        damping: float = 5.0,
        safety: float = 0.5,
    ):
        if sample_interval <= 0.0:
            raise SessionError(f"sample_interval must be positive, got {sample_interval}")
        self.solver = ExplicitSolver(mesh, material, damping=damping)
        dt_cap = stable_timestep(mesh, material, safety=safety)
        self.n_sub = max(1, math.ceil(sample_interval / dt_cap))
        self.dt = sample_interval / self.n_sub
        self.state = BodyState.zeros(mesh, material)

    def step(self, dense_force: np.ndarray) -> np.ndarray:
        for _ in range(self.n_sub):
            self.state = self.solver.step(self.state, dense_force, self.dt)
        return self.state.u.astype(np.float32)


# ----------------------------------------------------------------------
# sessions
# ----------------------------------------------------------------------


class Session:
    """One live mesh + engine pair with serialized stepping."""

    def __init__(self, sid: str, mesh: GridMesh, engine):
        self.id = sid
        self.mesh = mesh
        self.engine = engine
        self.lock = threading.Lock()
        self.failed: str | None = None
        self.steps = 0
        self.last_dv = 0.0
        self.max_abs_dv = 0.0
        self.total_latency = 0.0
        self._surface = mesh.free_surface_mask()
        self._rest = mesh.rest_volume

    # -- force validation ---------------------------------------------

    def densify(self, items) -> np.ndarray:
        """Expand the sparse wire format into a full nodal force field."""
        if not isinstance(items, list):
            raise SessionError('"forces" must be a list of {node, f} entries')
        dense = np.zeros(self.mesh.dims + (3,), dtype=np.float32)
        for entry in items:
            try:
                i, j, k = (int(c) for c in entry["node"])
                vec = [float(c) for c in entry["f"]]
            except (KeyError, TypeError, ValueError):
                raise SessionError(
                    f"malformed force entry {entry!r}; expected "
                    '{"node": [i, j, k], "f": [fx, fy, fz]}'
                ) from None
            if len(vec) != 3:
                raise SessionError(f"force vector needs 3 components, got {vec}")
            if not all(0 <= c < d for c, d in zip((i, j, k), self.mesh.dims)):
                raise SessionError(
                    f"node [{i}, {j}, {k}] outside grid dims {self.mesh.dims}"
                )
            if not self._surface[i, j, k]:
                if self.mesh.dirichlet[i, j, k]:
                    reason = "a fixed node"
                elif not self.mesh.occupancy[i, j, k]:
                    reason = "an inactive slot"
                else:
                    reason = "not on the free surface"
                raise SessionError(f"force on node [{i}, {j}, {k}] rejected: {reason}")
            dense[i, j, k] = vec
        return dense

    # -- stepping ------------------------------------------------------

    def step_dense(self, dense_force: np.ndarray) -> dict:
        with self.lock:
            if self.failed:
                raise SessionError(f"session failed earlier: {self.failed}")
            t0 = time.perf_counter()
            try:
                u = self.engine.step(dense_force)
            except (ElementInversionError, SolverError) as exc:
                self.failed = str(exc)
                raise SessionError(f"simulation failed: {exc}") from exc
            latency = time.perf_counter() - t0
            dv = float(total_volume(self.mesh, u.astype(np.float64)) - self._rest)
            self.steps += 1
            self.last_dv = dv
            self.max_abs_dv = max(self.max_abs_dv, abs(dv))
            self.total_latency += latency
        return {
            "u": u.astype(np.float32).ravel().tolist(),
            "dv": dv,
            "latency": latency,
        }

    def handle_message(self, text: str) -> dict:
        """One wire message in, one wire message out (never raises)."""
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            return {"error": f"message is not valid JSON: {exc}"}
        if not isinstance(payload, dict) or "forces" not in payload:
            return {"error": 'message must be an object with a "forces" list'}
        try:
            dense = self.densify(payload["forces"])
            return self.step_dense(dense)
        except SessionError as exc:
            return {"error": str(exc)}

    def mesh_description(self) -> dict:
        mesh = self.mesh
        return {
            "dims": list(mesh.dims),
            "spacing": [float(s) for s in mesh.spacing],
            "offset": [float(o) for o in mesh.offset],
            "occupancy": mesh.occupancy.astype(np.int8).ravel().tolist(),
            "dirichlet": mesh.dirichlet.astype(np.int8).ravel().tolist(),
            "free_surface": self._surface.astype(np.int8).ravel().tolist(),
            "rest_positions": mesh.rest_positions.reshape(-1).tolist(),
            "rest_volume": self._rest,
        }


# ----------------------------------------------------------------------
# HTTP application
# ----------------------------------------------------------------------


class MeshSpecBody(BaseModel):
    dims: tuple[int, int, int] | None = None
    spacing: float | tuple[float, float, float] = 1.0
    fixed: str = "sides+bottom"


class SessionBody(BaseModel):
    profile: str | None = None
    engine: str = "surrogate"
    checkpoint: str | None = None
    mesh: MeshSpecBody = MeshSpecBody()
    material: dict | None = None
    tau_scale: float = 1.0
    sample_interval: float = 0.05
    damping: float = 5.0


def _build_session(body: SessionBody) -> Session:
    if body.engine not in ("surrogate", "fem"):
        raise HTTPException(400, f"unknown engine {body.engine!r}")
    sid = uuid.uuid4().hex[:12]

    if body.engine == "surrogate":
        if not body.checkpoint:
            raise HTTPException(400, "surrogate sessions need a checkpoint path")
        try:
            model, _, _, _ = load_checkpoint(body.checkpoint)
        except (OSError, CheckpointError) as exc:
            raise HTTPException(400, f"cannot load checkpoint: {exc}") from exc
        dims = body.mesh.dims or model.spec.dims
        try:
            mesh = build_box_mesh(dims, body.mesh.spacing, fixed=body.mesh.fixed)
            engine = SurrogateEngine(model, mesh)
        except (MeshError, SessionError) as exc:
            raise HTTPException(400, str(exc)) from exc
        return Session(sid, mesh, engine)

    if body.mesh.dims is None:
        raise HTTPException(400, "fem sessions need mesh dims")
    try:
        mesh = build_box_mesh(body.mesh.dims, body.mesh.spacing, fixed=body.mesh.fixed)
        material = (
            Material.from_dict(body.material)
            if body.material is not None
            else Material.default_tissue(tau_scale=body.tau_scale)
        )
        engine = FemEngine(
            mesh, material, body.sample_interval, damping=body.damping
        )
    except (MeshError, MaterialError, SolverError, SessionError) as exc:
        raise HTTPException(400, str(exc)) from exc
    return Session(sid, mesh, engine)


def create_app(
    profiles: dict[str, dict] | None = None,
    default_profile: str | None = None,
) -> FastAPI:
    """Build the service application.

    ``profiles`` maps names to prepared session configs (same schema as
    the POST body), so clients — the bundled UI in particular — can open
    sessions without knowing server-side paths: ``POST /sessions`` with
    ``{"profile": name}``, or with an empty body for the default
    profile.  Explicit body fields override the profile's.
    """
    profiles = dict(profiles or {})
    if default_profile is None and profiles:
        default_profile = next(iter(profiles))
    if default_profile is not None and default_profile not in profiles:
        raise SessionError(f"default profile {default_profile!r} not in profiles")

    app = FastAPI(title="tissue deformation service")
    sessions: dict[str, Session] = {}
    app.state.sessions = sessions

    def _get(sid: str) -> Session:
        session = sessions.get(sid)
        if session is None:
            raise HTTPException(404, f"no session {sid!r}")
        return session

    @app.get("/profiles")
    def list_profiles() -> dict:
        return {"profiles": sorted(profiles), "default": default_profile}

    @app.post("/sessions", status_code=201)
    def create_session(body: SessionBody) -> dict:
        given = body.model_dump(exclude_unset=True)
        name = given.pop("profile", None)
        if name is None and not given:
            name = default_profile
        if name is not None:
            if name not in profiles:
                raise HTTPException(400, f"unknown profile {name!r}")
            given = {**profiles[name], **given}
        session = _build_session(SessionBody(**given))
        sessions[session.id] = session
        out = {
            "id": session.id,
            "engine": session.engine.kind,
            "dims": list(session.mesh.dims),
        }
        if session.engine.kind == "surrogate":
            out["n_t"] = session.engine.n_t
        else:
            out["n_substeps"] = session.engine.n_sub
            out["dt"] = session.engine.dt
        return out

    @app.get("/sessions/{sid}/mesh")
    def get_mesh(sid: str) -> dict:
        return _get(sid).mesh_description()

    @app.get("/sessions/{sid}")
    def get_stats(sid: str) -> dict:
        s = _get(sid)
        return {
            "id": s.id,
            "engine": s.engine.kind,
            "steps": s.steps,
            "last_dv": s.last_dv,
            "max_abs_dv": s.max_abs_dv,
            "mean_latency": s.total_latency / s.steps if s.steps else 0.0,
            "failed": s.failed,
        }

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str) -> None:
        _get(sid)
        del sessions[sid]

    @app.websocket("/sessions/{sid}/stream")
    async def stream(ws: WebSocket, sid: str) -> None:
        session = sessions.get(sid)
        if session is None:
            await ws.close(code=4404, reason=f"no session {sid!r}")
            return
        await ws.accept()
        try:
            while True:
                text = await ws.receive_text()
                reply = await run_in_threadpool(session.handle_message, text)
                await ws.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            pass

    return app


__all__ = [
    "FemEngine",
    "Session",
    "SessionError",
    "SurrogateEngine",
    "create_app",
]
