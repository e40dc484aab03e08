"""Live session service: the correction loop behind a wire protocol.

Wraps the per-frame engine in sessions a browser client can drive: frames
stream out over a WebSocket, clicks come back in and turn into buffered
visual prompts through exactly the same resolution path the simulated
feedback uses, so a session driven by scripted clicks reproduces the offline
episode bit for bit. REST endpoints cover session creation, scenario
presets, replay logs, and buffer dumps.

Message schema and ordering guarantees live in docs/protocol.md; that
document is normative for clients.
"""

from __future__ import annotations

import asyncio
import itertools
import json
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

from fastapi import Body, FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware

from .adapter import AdapterParams, load_checkpoint
from .detectors import MissPolicy, policy_from_dict, policy_to_dict
from .engine import EngineConfig, EpisodeLog, FrameLog, run_step
from .feedback import FeedbackEvent, click_to_visual_prompt
from .harness import _params_digest, _scenario_kwargs
from .metrics import match
from .promptbuffer import BufferConfig, PromptBuffer
from .scenesim import (
    Frame,
    Scenario,
    ScenarioConfig,
    ScenarioInfeasibleError,
    generate_scenario,
    render_frame,
)

PROTOCOL_VERSION = 1
CLIENT_TYPES = ("click", "control", "buffer")
CONTROL_OPS = ("pause", "resume", "step", "set_speed", "toggle_truth_reveal")
SPEED_BOUNDS = (0.05, 60.0)  # frames per second
STALENESS_WINDOW = 1  # clicks may target the current or the previous frame


class ProtocolError(Exception):
    """Client fault answered with an error message; session state unharmed."""

    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code
        self.detail = detail


@dataclass
class Session:
    sid: str
    scenario: Scenario
    policy: MissPolicy
    params: AdapterParams
    engine: EngineConfig
    buffer: PromptBuffer
    buffer_config: BufferConfig
    seed: int
    speed: float = 2.0
    reveal_truths: bool = False
    frame: int = -1  # last stepped frame; -1 before the first step
    playing: bool = False
    finished: bool = False
    clicks: int = 0
    frames_log: list[FrameLog] = field(default_factory=list)
    frame_cache: dict[int, Frame] = field(default_factory=dict)
    recalls: list[float] = field(default_factory=list)
    det_counts: list[int] = field(default_factory=list)
    clients: set = field(default_factory=set)  # per-socket outbound queues
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)
    wake: asyncio.Event = field(default_factory=asyncio.Event)
    player: asyncio.Task | None = None

    @property
    def n_frames(self) -> int:
        return self.scenario.config.n_frames

    def describe(self) -> dict:
        return {
            "session": self.sid,
            "frame": self.frame,
            "n_frames": self.n_frames,
            "playing": self.playing,
            "finished": self.finished,
            "speed": self.speed,
            "reveal_truths": self.reveal_truths,
            "clients": len(self.clients),
            "scenario_seed": self.scenario.config.seed,
            "policy": policy_to_dict(self.policy),
            "seed": self.seed,
        }


# --------------------------------------------------------------- presets


def scenario_presets(params: AdapterParams) -> list[dict]:
    """Canned demo scenarios sized to the served checkpoint's grid."""
    cfg = params.config
    grid = {"h": cfg.grid_h, "w": cfg.grid_w, "extent": cfg.grid_extent}
    half = cfg.grid_extent / 2.0
    base = {"grid": grid, "descriptor_dim": cfg.descriptor_dim}
    # the simulator caps the cast by grid area (one entity per 64 cells)
    cast = min(8, (cfg.grid_h * cfg.grid_w) // 64)

    def scripted_cast(n_frames):
        # three entities crossing near the ego, scaled to the grid
        return [
            {"entity_id": "a", "class_tag": "car",
             "spawn_frame": 0, "despawn_frame": n_frames,
             "start_xy": [0.3 * half, 0.2 * half],
             "velocity_xy": [-0.04 * half, 0.0],
             "size": [4.4, 1.9, 1.6], "yaw": 3.1416},
            {"entity_id": "b", "class_tag": "truck",
             "spawn_frame": 0, "despawn_frame": n_frames,
             "start_xy": [-0.4 * half, -0.25 * half],
             "velocity_xy": [0.03 * half, 0.02 * half],
             "size": [7.5, 2.5, 3.0], "yaw": 0.5},
            {"entity_id": "c", "class_tag": "van",
             "spawn_frame": 2, "despawn_frame": n_frames,
             "start_xy": [0.1 * half, -0.5 * half],
             "velocity_xy": [0.0, 0.045 * half],
             "size": [5.0, 2.0, 2.2], "yaw": 1.5708},
        ]

    return [
        {
            "name": "close-crossing",
            "description": "Three scripted vehicles crossing near the ego; "
                           "the detector drops everything beyond half range.",
            "scenario": dict(base, n_frames=40, ego_speed=0.0,
                             spawn_script=scripted_cast(40)),
            "policy": {"kind": "distant", "range_m": 0.35 * half,
                       "miss_rate": 0.9},
            "seed": 0,
        },
        {
            "name": "highway-stream",
            "description": "Random traffic around a moving ego; distant "
                           "objects drop out at the usual range.",
            "scenario": dict(base, n_frames=60, n_entities=cast,
                             ego_speed=3.0),
            "policy": {"kind": "distant", "range_m": 30.0, "miss_rate": 0.8},
            "seed": 1,
        },
        {
            "name": "unseen-van",
            "description": "The detector was never taught vans; every van "
                           "is invisible until someone clicks it.",
            "scenario": dict(base, n_frames=40, ego_speed=0.0,
                             spawn_script=scripted_cast(40)),
            "policy": {"kind": "unseen", "tags": ["van"]},
            "seed": 0,
        },
        {
            "name": "style-drift",
            "description": "Mid-run appearance shift that pushes the base "
                           "detector past its domain threshold.",
            "scenario": dict(base, n_frames=40, ego_speed=0.0,
                             spawn_script=scripted_cast(40),
                             style_shift=[20, 0.3]),
            "policy": {"kind": "shift", "epsilon_threshold": 0.25,
                       "miss_rate": 0.9},
            "seed": 0,
        },
    ]


# ----------------------------------------------------- session mechanics
#
# Every mutation (step, click, control) runs under the session lock, so a
# session only ever changes in one strictly serialized order no matter how
# many sockets are attached.


def _frame_recall(frame: Frame, merged) -> float:
    visible = [t for t in frame.truths if t.visible]
    if not visible:
        return 1.0
    pairs = match(visible, merged, thresholds=(2.0,)).pairs[2.0]
    return len(pairs) / len(visible)


def _truth_docs(frame: Frame) -> list[dict]:
    return [
        {
            "entity_id": t.entity_id,
            "box": t.box.to_dict(),
            "visible": t.visible,
            "class_tag": t.class_tag,
            "range_m": t.range_m,
        }
        for t in frame.truths
    ]


def _detection_docs(merged) -> list[dict]:
    # same shape as replay-log entries so clients parse one schema
    return [
        {
            "box": d.box.to_dict(),
            "confidence": d.confidence,
            "provenance": d.provenance,
            "class_tag": d.class_tag,
        }
        for d in merged
    ]


def _frame_message(s: Session) -> dict:
    fl = s.frames_log[-1]
    frame = s.frame_cache[fl.index]
    payload = {
        "detections": _detection_docs(fl.merged),
        "truths": _truth_docs(frame) if s.reveal_truths else None,
        "buffer": {
            "size": len(s.buffer),
            "capacity": s.buffer.config.capacity,
            "ids": s.buffer.ids(),
            "confidences": fl.prompt_confidences,
            "evicted": fl.evicted,
        },
        "metrics": {
            "frames": len(s.recalls),
            "clicks": s.clicks,
            "frame_recall": s.recalls[-1],
            "mean_recall": sum(s.recalls) / len(s.recalls),
            "mean_detections": sum(s.det_counts) / len(s.det_counts),
        },
        "playing": s.playing,
        "speed": s.speed,
        "finished": s.finished,
        "reveal_truths": s.reveal_truths,
    }
    return {"type": "frame", "session": s.sid, "frame": fl.index,
            "payload": payload}


def _buffer_summary(s: Session) -> dict:
    return {
        "size": len(s.buffer),
        "capacity": s.buffer.config.capacity,
        "entries": [
            {
                "prompt_id": e.prompt.prompt_id,
                "source": e.source,
                "enqueued_at": e.enqueued_at,
                "history": list(e.confidence_history),
                "mean_confidence": e.mean_confidence(),
            }
            for e in s.buffer.entries()
        ],
    }


def _step_locked(s: Session) -> dict:
    """Advance one frame; returns the frame message. Caller holds the lock."""
    if s.finished:
        raise ProtocolError("finished", "scenario has no frames left")
    t = s.frame + 1
    frame = render_frame(s.scenario, t)
    merged, confidences, evicted = run_step(
        frame, s.policy, s.params, s.buffer, s.engine, s.seed)
    s.frames_log.append(FrameLog(
        index=t, merged=merged, events=[], buffer_size=len(s.buffer),
        prompt_confidences=confidences, evicted=evicted,
    ))
    s.frame_cache[t] = frame
    s.frame_cache.pop(t - STALENESS_WINDOW - 1, None)
    s.frame = t
    s.recalls.append(_frame_recall(frame, merged))
    s.det_counts.append(len(merged))
    if t + 1 >= s.n_frames:
        s.finished = True
        s.playing = False
    return _frame_message(s)


def _click_locked(s: Session, frame_idx, payload: dict) -> dict:
    """Resolve a click into a buffered prompt. Caller holds the lock.

    The click is applied to the frame the user actually saw: the current
    frame or, within the staleness window, the one before it. Prompts
    enqueued here first influence the next stepped frame.
    """
    if not isinstance(frame_idx, int) or isinstance(frame_idx, bool):
        raise ProtocolError("malformed", "click needs an integer frame")
    if s.frame < 0:
        raise ProtocolError("no_frame", "no frame has been streamed yet")
    if frame_idx > s.frame:
        raise ProtocolError("future_click",
                            f"frame {frame_idx} has not happened "
                            f"(current {s.frame})")
    if frame_idx < s.frame - STALENESS_WINDOW:
        raise ProtocolError("stale_click",
                            f"frame {frame_idx} is out of the staleness "
                            f"window (current {s.frame})")
    try:
        u = float(payload["u"])
        v = float(payload["v"])
    except (KeyError, TypeError, ValueError):
        raise ProtocolError("malformed", "click payload needs numeric u, v")
    grid = s.params.config
    if not (0.0 <= u <= grid.grid_w and 0.0 <= v <= grid.grid_h):
        raise ProtocolError("out_of_bounds",
                            f"click ({u:.2f}, {v:.2f}) outside the grid")
    frame = s.frame_cache[frame_idx]
    prompt, box2, fallback = click_to_visual_prompt((u, v), frame, s.params)
    evicted = s.buffer.enqueue(prompt, frame_idx)
    event = FeedbackEvent(
        frame_index=frame_idx, click=(u, v), resolved_box2d=box2,
        prompt_id=prompt.prompt_id, origin="human", low_quality=fallback,
        entity_id=None,
    )
    s.frames_log[frame_idx].events.append(event)
    # the latest entry reflects the buffer as the frame ends
    s.frames_log[-1].buffer_size = len(s.buffer)
    s.clicks += 1
    return {
        "op": "click",
        "prompt_id": prompt.prompt_id,
        "low_quality": fallback,
        "box2d": {"center": list(box2.center), "extent": list(box2.extent)},
        "evicted": evicted,
        "frame": frame_idx,
    }


def _control_locked(s: Session, payload: dict):
    """Apply a control op; returns (ack payload, frame message or None)."""
    op = payload.get("op")
    if op not in CONTROL_OPS:
        raise ProtocolError("unknown_op", f"unknown control op {op!r}")
    refreshed = None
    if op == "pause":
        s.playing = False
    elif op == "resume":
        if s.finished:
            raise ProtocolError("finished", "scenario has no frames left")
        s.playing = True
        s.wake.set()
    elif op == "step":
        if s.playing:
            raise ProtocolError("not_paused", "pause before stepping")
        refreshed = _step_locked(s)
    elif op == "set_speed":
        try:
            speed = float(payload["value"])
        except (KeyError, TypeError, ValueError):
            raise ProtocolError("malformed", "set_speed needs a numeric value")
        lo, hi = SPEED_BOUNDS
        if not lo <= speed <= hi:
            raise ProtocolError("bad_speed",
                                f"speed must be in [{lo}, {hi}] frames/s")
        s.speed = speed
    elif op == "toggle_truth_reveal":
        s.reveal_truths = not s.reveal_truths
        if s.frames_log:  # re-send the current frame under the new flag
            refreshed = _frame_message(s)
    ack = {
        "op": op,
        "frame": s.frame,
        "playing": s.playing,
        "speed": s.speed,
        "reveal_truths": s.reveal_truths,
        "finished": s.finished,
    }
    return ack, refreshed


def _broadcast(s: Session, message: dict) -> None:
    for q in list(s.clients):
        q.put_nowait(message)


async def _player(s: Session):
    """Background ticker: steps the session while it is playing.

    Sleeps before stepping so a resume never double-fires right after a
    manual step; the cadence is 1/speed seconds per frame.
    """
    while True:
        if not s.playing or s.finished:
            s.wake.clear()
            await s.wake.wait()
            continue
        await asyncio.sleep(1.0 / s.speed)
        if not s.playing or s.finished:
            continue
        async with s.lock:
            message = _step_locked(s)
        _broadcast(s, message)


def replay_log(s: Session) -> EpisodeLog:
    """The session so far, in the same shape as an offline episode log."""
    bc = s.buffer_config
    ec = s.engine
    return EpisodeLog(
        seed=s.seed,
        scenario_seed=s.scenario.config.seed,
        n_frames=s.n_frames,
        policy=policy_to_dict(s.policy),
        engine={
            "conf_floor": ec.conf_floor,
            "nms_iou": ec.nms_iou,
            "noise": {
                "sigma_center": ec.detector_noise.sigma_center,
                "sigma_log_size": ec.detector_noise.sigma_log_size,
                "sigma_yaw": ec.detector_noise.sigma_yaw,
            },
        },
        feedback=None,  # live sessions take clicks, not simulated feedback
        buffer={
            "capacity": bc.capacity,
            "conf_floor": bc.conf_floor,
            "window": bc.window,
            "iou_dup": bc.iou_dup,
            "frozen": False,
            "preloaded": [],
        },
        frames=list(s.frames_log),
    )


# ------------------------------------------------------------------- app


def create_app(params: AdapterParams) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for s in app.state.sessions.values():
            if s.player is not None:
                s.player.cancel()

    app = FastAPI(title="promptloop-service", lifespan=lifespan)
    # browser cockpits are served from arbitrary origins (static files)
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.params = params
    app.state.digest = _params_digest(params)
    app.state.sessions = {}
    app.state.counter = itertools.count(1)
    presets = {p["name"]: p for p in scenario_presets(params)}

    @app.get("/")
    def root():
        cfg = params.config
        return {
            "service": "promptloop",
            "protocol": PROTOCOL_VERSION,
            "checkpoint": app.state.digest,
            "grid": {"h": cfg.grid_h, "w": cfg.grid_w,
                     "extent": cfg.grid_extent},
            "descriptor_dim": cfg.descriptor_dim,
        }

    @app.get("/scenarios")
    def list_scenarios():
        return {"scenarios": list(presets.values())}

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": [s.describe()
                             for s in app.state.sessions.values()]}

    def _get(sid: str) -> Session:
        s = app.state.sessions.get(sid)
        if s is None:
            raise HTTPException(404, f"no session {sid!r}")
        return s

    @app.post("/sessions", status_code=201)
    async def create_session(body: dict = Body(default={})):
        scenario_doc: dict = {}
        policy_doc = {"kind": "none"}
        seed = 0
        if "preset" in body:
            preset = presets.get(body["preset"])
            if preset is None:
                raise HTTPException(404, f"no preset {body['preset']!r}")
            scenario_doc = dict(preset["scenario"])
            policy_doc = preset["policy"]
            seed = preset["seed"]
        scenario_doc.update(body.get("scenario") or {})
        scenario_doc.setdefault("grid", {
            "h": params.config.grid_h, "w": params.config.grid_w,
            "extent": params.config.grid_extent,
        })
        scenario_doc.setdefault("descriptor_dim", params.config.descriptor_dim)
        policy_doc = body.get("policy") or policy_doc
        seed = body.get("seed", seed)
        try:
            policy = policy_from_dict(policy_doc)
            scenario = generate_scenario(
                ScenarioConfig(**_scenario_kwargs(scenario_doc)))
            engine_kw = dict(body.get("engine") or {})
            engine = EngineConfig(**engine_kw)
            buffer_config = BufferConfig(**(body.get("buffer") or {}))
        except ScenarioInfeasibleError as e:
            raise HTTPException(400, f"scenario infeasible: {e}")
        except (TypeError, ValueError) as e:
            raise HTTPException(400, str(e))
        cfg = params.config
        grid = scenario.config.grid
        if (grid.h, grid.w) != (cfg.grid_h, cfg.grid_w) \
                or grid.extent != cfg.grid_extent \
                or scenario.config.descriptor_dim != cfg.descriptor_dim:
            raise HTTPException(
                400, "scenario grid does not match the served checkpoint")
        s = Session(
            sid=f"s{next(app.state.counter):04d}",
            scenario=scenario,
            policy=policy,
            params=params,
            engine=engine,
            buffer=PromptBuffer(buffer_config),
            buffer_config=buffer_config,
            seed=int(seed),
            speed=float(body.get("speed", 2.0)),
            reveal_truths=bool(body.get("reveal_truths", False)),
        )
        s.player = asyncio.create_task(_player(s))
        app.state.sessions[s.sid] = s
        return s.describe()

    @app.get("/sessions/{sid}/replay")
    async def get_replay(sid: str):
        s = _get(sid)
        async with s.lock:  # a consistent snapshot even while playing
            return replay_log(s).to_dict()

    @app.get("/sessions/{sid}/buffer")
    async def get_buffer(sid: str):
        s = _get(sid)
        async with s.lock:
            return s.buffer.to_dict()

    @app.websocket("/sessions/{sid}/stream")
    async def stream(ws: WebSocket, sid: str):
        await ws.accept()
        s = app.state.sessions.get(sid)
        if s is None:
            await ws.send_json(_error(sid, -1, "no_session",
                                      f"no session {sid!r}"))
            await ws.close(code=4404)
            return
        queue: asyncio.Queue = asyncio.Queue()
        s.clients.add(queue)
        queue.put_nowait({
            "type": "ack", "session": s.sid, "frame": s.frame,
            "payload": dict(_state_payload(s), op="connect",
                            protocol=PROTOCOL_VERSION),
        })

        async def sender():
            while True:
                await ws.send_json(await queue.get())

        send_task = asyncio.create_task(sender())
        try:
            while True:
                raw = await ws.receive_text()
                await _handle(s, queue, raw)
        except WebSocketDisconnect:
            pass
        finally:
            s.clients.discard(queue)
            send_task.cancel()

    return app


def _state_payload(s: Session) -> dict:
    return {
        "frame": s.frame,
        "n_frames": s.n_frames,
        "playing": s.playing,
        "speed": s.speed,
        "reveal_truths": s.reveal_truths,
        "finished": s.finished,
    }


def _error(sid, frame, code, detail) -> dict:
    return {"type": "error", "session": sid, "frame": frame,
            "payload": {"code": code, "detail": detail}}


async def _handle(s: Session, queue: asyncio.Queue, raw: str) -> None:
    """Dispatch one inbound message; protocol faults answer with an error
    message on the offending socket and leave the session untouched."""
    try:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError:
            raise ProtocolError("malformed", "message is not valid JSON")
        if not isinstance(doc, dict) or not isinstance(doc.get("type"), str):
            raise ProtocolError("malformed", "message needs a string 'type'")
        mtype = doc["type"]
        if mtype not in CLIENT_TYPES:
            raise ProtocolError("unknown_type",
                                f"clients may send {CLIENT_TYPES}, "
                                f"not {mtype!r}")
        if "session" in doc and doc["session"] != s.sid:
            raise ProtocolError("wrong_session",
                                f"socket is bound to {s.sid!r}")
        payload = doc.get("payload")
        if not isinstance(payload, dict):
            payload = {}
        if mtype == "click":
            async with s.lock:
                ack = _click_locked(s, doc.get("frame"), payload)
                buffer_msg = {"type": "buffer", "session": s.sid,
                              "frame": s.frame, "payload": _buffer_summary(s)}
            _broadcast(s, buffer_msg)
            queue.put_nowait({"type": "ack", "session": s.sid,
                              "frame": s.frame, "payload": ack})
        elif mtype == "control":
            async with s.lock:
                ack, refreshed = _control_locked(s, payload)
            if refreshed is not None:
                _broadcast(s, refreshed)
            queue.put_nowait({"type": "ack", "session": s.sid,
                              "frame": s.frame, "payload": ack})
        elif mtype == "buffer":
            async with s.lock:
                summary = _buffer_summary(s)
            queue.put_nowait({"type": "buffer", "session": s.sid,
                              "frame": s.frame, "payload": summary})
    except ProtocolError as e:
        queue.put_nowait(_error(s.sid, s.frame, e.code, e.detail))


def serve_main(args) -> int:
    """Entry point behind the command line 'serve' subcommand."""
    import uvicorn

    params = load_checkpoint(args.checkpoint)
    app = create_app(params)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0
