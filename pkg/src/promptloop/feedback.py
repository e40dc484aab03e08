"""Simulated user feedback: miss detection, clicks, and prompt resolution.

A feedback pass compares merged detections against visible ground truth,
clicks (with optional perturbation) on each missed object, and resolves the
click into a visual prompt by running the adapter's point-prompt decode and
cropping the resolved footprint. Live human clicks from the service reuse
the same resolution path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterParams, VisualPrompt, decode_queries, encode_point_prompt
from .detectors import Detection
from .geometry import Box2D, center_distance, project_to_grid
from .scenesim import Frame, TruthBox, crop_descriptor
from .seeding import rng_for

FALLBACK_WINDOW_CELLS = 5  # square crop side used when decode fails
RESOLVE_CONF_FLOOR = 0.3


@dataclass(frozen=True)
class FeedbackConfig:
    interval: int = 0  # frames between collection events; 0 = every frame
    perturb_ratio: float = 0.0  # max click offset as a fraction of box extent
    miss_distance: float = 2.0  # meters

    def __post_init__(self):
        if self.interval < 0:
            raise ValueError("interval must be >= 0")
        if not 0.0 <= self.perturb_ratio <= 0.4:
            raise ValueError("perturb_ratio must be in [0, 0.4]")
        if self.miss_distance <= 0:
            raise ValueError("miss_distance must be positive")


@dataclass(frozen=True)
class FeedbackEvent:
    frame_index: int
    click: tuple[float, float]  # grid units
    resolved_box2d: Box2D
    prompt_id: str
    origin: str = "simulated"  # simulated | human
    low_quality: bool = False  # fallback window was used
    entity_id: str | None = None  # clicked truth, when simulated

    def to_dict(self) -> dict:
        return {
            "frame": self.frame_index,
            "click": list(self.click),
            "box2d": {"center": list(self.resolved_box2d.center),
                      "extent": list(self.resolved_box2d.extent)},
            "prompt_id": self.prompt_id,
            "origin": self.origin,
            "low_quality": self.low_quality,
            "entity_id": self.entity_id,
        }


def should_collect(frame_index: int, config: FeedbackConfig) -> bool:
    """True on collection frames: every (interval + 1)th frame from 0."""
    return frame_index % (config.interval + 1) == 0


def find_missed(truths: list[TruthBox], merged: list[Detection],
                miss_distance: float = 2.0) -> list[TruthBox]:
    """Visible truths with no merged detection within miss_distance meters."""
    out = []
    for t in truths:
        if not t.visible:
            continue
        if not any(center_distance(d.box, t.box) <= miss_distance
                   for d in merged):
            out.append(t)
    return out


def simulate_click(truth: TruthBox, frame: Frame, perturb_ratio: float,
                   seed: int, grid) -> tuple[float, float]:
    """Click near the truth's projected center, perturbed and kept in-box.

    The offset is uniform per axis within perturb_ratio * extent, then
    clamped to the projected box, so a perturbed click still lands on the
    object. Deterministic in (seed, frame, entity).
    """
    box2 = project_to_grid(truth.box, frame.ego, grid)
    if box2 is None:
        raise ValueError(f"truth {truth.entity_id} projects outside the grid")
    rng = rng_for(seed, "click", frame.index, truth.entity_id)
    off = rng.uniform(-1.0, 1.0, size=2) * perturb_ratio * np.array(box2.extent)
    u = min(max(box2.center[0] + off[0], box2.lo[0]), box2.hi[0])
    v = min(max(box2.center[1] + off[1], box2.lo[1]), box2.hi[1])
    return (float(u), float(v))


def _fallback_window(click, grid) -> Box2D:
    half = FALLBACK_WINDOW_CELLS / 2.0
    lo_u = max(click[0] - half, 0.0)
    hi_u = min(click[0] + half, float(grid.w))
    lo_v = max(click[1] - half, 0.0)
    hi_v = min(click[1] + half, float(grid.h))
    return Box2D(center=((lo_u + hi_u) / 2, (lo_v + hi_v) / 2),
                 extent=(hi_u - lo_u, hi_v - lo_v))


def prompt_id_for(frame_index: int, click) -> str:
    return f"p{frame_index:03d}-{click[0]:.2f}-{click[1]:.2f}"


def click_to_visual_prompt(click, frame: Frame, params: AdapterParams
                           ) -> tuple[VisualPrompt, Box2D, bool]:
    """Resolve a click into (VisualPrompt, resolved Box2D, fallback flag).

    The click decodes through the point-prompt path; a confident decode
    (confidence >= 0.3) crops the detection's projected footprint, otherwise
    a fixed 5x5-cell window around the click is cropped instead.
    """
    grid = params.config.grid
    query = encode_point_prompt(click, params)
    det = decode_queries([query], frame, params)[0]
    box2 = None
    if det.confidence >= RESOLVE_CONF_FLOOR:
        box2 = project_to_grid(det.box, frame.ego, grid)
    fallback = box2 is None
    if fallback:
        box2 = _fallback_window(click, grid)
    descriptor = crop_descriptor(frame, box2)
    prompt = VisualPrompt(prompt_id=prompt_id_for(frame.index, click),
                          descriptor=descriptor)
    return prompt, box2, fallback


def collect_feedback(frame: Frame, merged: list[Detection],
                     params: AdapterParams, config: FeedbackConfig,
                     seed: int, exclude_entities: frozenset = frozenset()
                     ) -> list[tuple[FeedbackEvent, VisualPrompt]]:
    """One click per missed truth on collection frames; [] otherwise.

    exclude_entities suppresses re-clicking objects whose prompts are still
    buffered (one click per object while its prompt lives).
    """
    if not should_collect(frame.index, config):
        return []
    out = []
    for truth in find_missed(frame.truths, merged, config.miss_distance):
        if truth.entity_id in exclude_entities:
            continue
        click = simulate_click(truth, frame, config.perturb_ratio, seed,
                               params.config.grid)
        prompt, box2, fallback = click_to_visual_prompt(click, frame, params)
        event = FeedbackEvent(
            frame_index=frame.index, click=click, resolved_box2d=box2,
            prompt_id=prompt.prompt_id, origin="simulated",
            low_quality=fallback, entity_id=truth.entity_id,
        )
        out.append((event, prompt))
    return out
