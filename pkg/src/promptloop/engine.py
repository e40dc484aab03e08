"""Per-frame correction loop and episode runner.

One step: base detect -> prompt-driven detect over the buffered visual
prompts -> confidence filter + NMS merge -> buffer bookkeeping. The episode
runner adds the simulated-feedback pass and logs everything needed to replay
or evaluate the run. Prompts issued on frame t first influence frame t+1;
the step function itself is acyclic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .adapter import AdapterParams, PromptSet, VisualPrompt, build_queries, decode_queries
from .detectors import Detection, MissPolicy, NoiseParams, detect, policy_from_dict, policy_to_dict
from .feedback import FeedbackConfig, FeedbackEvent, collect_feedback
from .geometry import Box2D, Box3D, nms
from .promptbuffer import BufferConfig, PromptBuffer
from .scenesim import Frame, Scenario, render_frame

LOG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EngineConfig:
    conf_floor: float = 0.3
    nms_iou: float = 0.5
    detector_noise: NoiseParams = field(default_factory=NoiseParams)

    def __post_init__(self):
        if not 0.0 <= self.conf_floor <= 1.0:
            raise ValueError("conf_floor must be in [0, 1]")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")


@dataclass
class FrameLog:
    index: int
    merged: list[Detection]
    events: list[FeedbackEvent]
    buffer_size: int
    prompt_confidences: dict[str, float]  # buffered ids -> best merged conf
    evicted: list[str]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "merged": [
                {
                    "box": d.box.to_dict(),
                    "confidence": d.confidence,
                    "provenance": d.provenance,
                    "class_tag": d.class_tag,
                }
                for d in self.merged
            ],
            "events": [e.to_dict() for e in self.events],
            "buffer_size": self.buffer_size,
            "prompt_confidences": self.prompt_confidences,
            "evicted": self.evicted,
        }


@dataclass
class EpisodeLog:
    seed: int
    scenario_seed: int
    n_frames: int
    policy: dict
    engine: dict
    feedback: dict | None
    buffer: dict
    frames: list[FrameLog]

    def buffer_trace(self) -> list[int]:
        return [f.buffer_size for f in self.frames]

    def to_dict(self) -> dict:
        return {
            "schema_version": LOG_SCHEMA_VERSION,
            "seed": self.seed,
            "scenario_seed": self.scenario_seed,
            "n_frames": self.n_frames,
            "policy": self.policy,
            "engine": self.engine,
            "feedback": self.feedback,
            "buffer": self.buffer,
            "frames": [f.to_dict() for f in self.frames],
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_dict(cls, doc: dict) -> "EpisodeLog":
        ver = doc.get("schema_version")
        if ver != LOG_SCHEMA_VERSION:
            raise ValueError(f"unsupported episode log schema_version {ver!r}")
        frames = []
        for fd in doc["frames"]:
            merged = [
                Detection(
                    box=Box3D.from_dict(dd["box"]),
                    confidence=dd["confidence"],
                    provenance=dd["provenance"],
                    class_tag=dd["class_tag"],
                )
                for dd in fd["merged"]
            ]
            events = [
                FeedbackEvent(
                    frame_index=ed["frame"],
                    click=tuple(ed["click"]),
                    resolved_box2d=Box2D(center=tuple(ed["box2d"]["center"]),
                                         extent=tuple(ed["box2d"]["extent"])),
                    prompt_id=ed["prompt_id"],
                    origin=ed["origin"],
                    low_quality=ed["low_quality"],
                    entity_id=ed.get("entity_id"),
                )
                for ed in fd["events"]
            ]
            frames.append(FrameLog(
                index=fd["index"], merged=merged, events=events,
                buffer_size=fd["buffer_size"],
                prompt_confidences=fd["prompt_confidences"],
                evicted=fd["evicted"],
            ))
        return cls(
            seed=doc["seed"], scenario_seed=doc["scenario_seed"],
            n_frames=doc["n_frames"], policy=doc["policy"],
            engine=doc["engine"], feedback=doc["feedback"],
            buffer=doc["buffer"], frames=frames,
        )

    @classmethod
    def load(cls, path: str) -> "EpisodeLog":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def merge_detections(base: list[Detection], prompt_dets: list[Detection],
                     config: EngineConfig) -> list[Detection]:
    """Pool, confidence-filter, then NMS. Provenance plays no role in
    suppression; only confidence does."""
    pool = [d for d in base + prompt_dets if d.confidence >= config.conf_floor]
    return nms(pool, config.nms_iou)


def _check_compat(scenario: Scenario, params: AdapterParams):
    cfg = params.config
    grid = scenario.config.grid
    if (grid.h, grid.w) != (cfg.grid_h, cfg.grid_w) \
            or grid.extent != cfg.grid_extent \
            or scenario.config.descriptor_dim != cfg.descriptor_dim:
        raise ValueError(
            "adapter checkpoint was built for a different grid/descriptor "
            f"configuration: scenario has {(grid.h, grid.w, grid.extent)} "
            f"dim {scenario.config.descriptor_dim}, checkpoint expects "
            f"{(cfg.grid_h, cfg.grid_w, cfg.grid_extent)} dim {cfg.descriptor_dim}"
        )


def run_step(frame: Frame, policy: MissPolicy, params: AdapterParams,
             buffer: PromptBuffer, config: EngineConfig, seed: int,
             mutate_buffer: bool = True):
    """One correction-loop step on a frame.

    Returns (merged detections, per-frame prompt confidence map, evicted
    ids). With `mutate_buffer` False (frozen-buffer experiments) the buffer
    is only read.
    """
    base = detect(frame, policy, seed, config.detector_noise)
    prompts = buffer.prompts()
    if prompts:
        queries = build_queries(PromptSet(visuals=prompts), frame, params)
        prompt_dets = decode_queries(queries, frame, params)
    else:
        prompt_dets = []
    merged = merge_detections(base, prompt_dets, config)

    best: dict[str, tuple[float, Box3D | None]] = {}
    for d in merged:
        if not d.from_prompt:
            continue
        pid = d.provenance.split(":", 1)[1]
        if pid not in best or d.confidence > best[pid][0]:
            best[pid] = (d.confidence, d.box)
    confidences = {pid: best.get(pid, (0.0, None))[0] for pid in buffer.ids()}

    evicted: list[str] = []
    if mutate_buffer:
        buffer.record_results(best, frame.index)
        evicted = buffer.dequeue_sweep()
    return merged, confidences, evicted


def run_episode(scenario: Scenario, policy: MissPolicy,
                params: AdapterParams, seed: int,
                feedback_config: FeedbackConfig | None = None,
                buffer_config: BufferConfig | None = None,
                engine_config: EngineConfig | None = None,
                preload_prompts: list[VisualPrompt] | None = None,
                freeze_buffer: bool = False,
                render=None) -> EpisodeLog:
    """Run the loop over a whole scenario and log every frame.

    feedback_config None disables feedback (the control arm). Preloaded
    prompts enter the buffer before frame 0; with freeze_buffer the buffer
    contents never change (no feedback, no recording, no eviction).
    Deterministic: identical arguments produce a bit-identical log.
    """
    _check_compat(scenario, params)
    engine_config = engine_config or EngineConfig()
    buffer_config = buffer_config or BufferConfig()
    render = render or render_frame
    buffer = PromptBuffer(buffer_config)
    for p in preload_prompts or []:
        buffer.enqueue(p, -1, source="preloaded")

    prompted: dict[str, str] = {}  # entity id -> live prompt id
    frames: list[FrameLog] = []
    for t in range(scenario.config.n_frames):
        frame = render(scenario, t)
        merged, confidences, evicted = run_step(
            frame, policy, params, buffer, engine_config, seed,
            mutate_buffer=not freeze_buffer,
        )
        events: list[FeedbackEvent] = []
        if feedback_config is not None and not freeze_buffer:
            live = set(buffer.ids())
            exclude = frozenset(e for e, pid in prompted.items() if pid in live)
            for event, prompt in collect_feedback(
                frame, merged, params, feedback_config, seed,
                exclude_entities=exclude,
            ):
                buffer.enqueue(prompt, t)  # takes effect next frame
                if event.entity_id is not None:
                    prompted[event.entity_id] = event.prompt_id
                events.append(event)
        frames.append(FrameLog(
            index=t, merged=merged, events=events,
            buffer_size=len(buffer), prompt_confidences=confidences,
            evicted=evicted,
        ))

    return EpisodeLog(
        seed=seed,
        scenario_seed=scenario.config.seed,
        n_frames=scenario.config.n_frames,
        policy=policy_to_dict(policy),
        engine={
            "conf_floor": engine_config.conf_floor,
            "nms_iou": engine_config.nms_iou,
            "noise": {
                "sigma_center": engine_config.detector_noise.sigma_center,
                "sigma_log_size": engine_config.detector_noise.sigma_log_size,
                "sigma_yaw": engine_config.detector_noise.sigma_yaw,
            },
        },
        feedback=None if feedback_config is None else {
            "interval": feedback_config.interval,
            "perturb_ratio": feedback_config.perturb_ratio,
            "miss_distance": feedback_config.miss_distance,
        },
        buffer={
            "capacity": buffer_config.capacity,
            "conf_floor": buffer_config.conf_floor,
            "window": buffer_config.window,
            "iou_dup": buffer_config.iou_dup,
            "frozen": freeze_buffer,
            "preloaded": [p.prompt_id for p in preload_prompts or []],
        },
        frames=frames,
    )


def track_assignments(log: EpisodeLog) -> dict[str, list[tuple[int, Detection]]]:
    """Frame-indexed surviving detections per prompt id (prompt tracks)."""
    tracks: dict[str, list[tuple[int, Detection]]] = {}
    for fl in log.frames:
        for d in fl.merged:
            if d.from_prompt:
                pid = d.provenance.split(":", 1)[1]
                tracks.setdefault(pid, []).append((fl.index, d))
    return tracks
