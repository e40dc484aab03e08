"""Bounded store of visual prompts with confidence-driven eviction.

Entries track the best merged-output confidence their prompt achieved on
each recent frame. A sweep evicts prompts that stayed below the confidence
floor for a full window (the object likely left the scene) and deduplicates
prompts whose predictions collapse onto the same object.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .adapter import VisualPrompt
from .geometry import Box3D, DegenerateBoxError, bev_iou


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 32
    conf_floor: float = 0.3
    window: int = 5  # consecutive low-confidence frames before eviction
    iou_dup: float = 0.7

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for name in ("conf_floor", "iou_dup"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class BufferEntry:
    prompt: VisualPrompt
    enqueued_at: int
    seq: int  # monotonic insertion counter; orders same-frame enqueues
    source: str = "feedback"  # feedback | preloaded
    confidence_history: deque = field(default_factory=deque)
    last_prediction: Box3D | None = None

    def mean_confidence(self) -> float:
        # fresh entries rank highest so they survive until actually tried
        if not self.confidence_history:
            return 1.0
        return float(sum(self.confidence_history) / len(self.confidence_history))


class PromptBuffer:
    """Mutating buffer; the service serializes access per session."""

    def __init__(self, config: BufferConfig | None = None):
        self.config = config or BufferConfig()
        self._entries: list[BufferEntry] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        return [e.prompt.prompt_id for e in self._entries]

    def get(self, prompt_id: str) -> BufferEntry | None:
        for e in self._entries:
            if e.prompt.prompt_id == prompt_id:
                return e
        return None

    def prompts(self) -> list[VisualPrompt]:
        """Prompts in enqueue order, for feeding alignment."""
        return [e.prompt for e in self._entries]

    def entries(self) -> list[BufferEntry]:
        return list(self._entries)

    def enqueue(self, prompt: VisualPrompt, frame_index: int,
                source: str = "feedback") -> str | None:
        """Add a prompt; returns the id evicted to make room, if any.

        Re-enqueueing an existing id replaces that entry (fresh history,
        new position at the end of the order). At capacity the entry with
        the lowest mean confidence history is evicted first; ties fall to
        the oldest.
        """
        evicted = None
        self._entries = [e for e in self._entries
                         if e.prompt.prompt_id != prompt.prompt_id]
        if len(self._entries) >= self.config.capacity:
            victim = min(self._entries, key=lambda e: (e.mean_confidence(), e.seq))
            self._entries.remove(victim)
            evicted = victim.prompt.prompt_id
        entry = BufferEntry(
            prompt=prompt,
            enqueued_at=frame_index,
            seq=self._seq,
            source=source,
            confidence_history=deque(maxlen=self.config.window),
        )
        self._seq += 1
        self._entries.append(entry)
        return evicted

    def record_results(self, per_prompt_best: dict, frame_index: int) -> None:
        """Append each entry's best merged confidence for this frame.

        per_prompt_best maps prompt id -> (confidence, Box3D | None); ids
        absent from the map score 0.0 for the frame. Unknown ids raise.
        """
        known = set(self.ids())
        unknown = set(per_prompt_best) - known
        if unknown:
            raise KeyError(f"unknown prompt ids: {sorted(unknown)}")
        for e in self._entries:
            conf, box = per_prompt_best.get(e.prompt.prompt_id, (0.0, None))
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"confidence {conf} outside [0, 1]")
            e.confidence_history.append(float(conf))
            if box is not None:
                e.last_prediction = box

    def dequeue_sweep(self) -> list[str]:
        """Evict stale and redundant prompts; returns evicted ids.

        First pass: an entry leaves when its last `window` confidences are
        all below conf_floor (requires a full window of evidence). Second
        pass, in enqueue order: when two survivors' predictions overlap at
        bev IoU >= iou_dup, the later-enqueued one leaves.
        """
        cfg = self.config
        evicted: list[str] = []
        survivors: list[BufferEntry] = []
        for e in self._entries:
            hist = e.confidence_history
            if len(hist) == cfg.window and all(c < cfg.conf_floor for c in hist):
                evicted.append(e.prompt.prompt_id)
            else:
                survivors.append(e)

        ordered = sorted(survivors, key=lambda e: e.seq)
        dropped: set[int] = set()
        for i in range(len(ordered)):
            if ordered[i].seq in dropped or ordered[i].last_prediction is None:
                continue
            for j in range(i + 1, len(ordered)):
                late = ordered[j]
                if late.seq in dropped or late.last_prediction is None:
                    continue
                try:
                    iou = bev_iou(ordered[i].last_prediction, late.last_prediction)
                except DegenerateBoxError:
                    continue
                if iou >= cfg.iou_dup:
                    dropped.add(late.seq)
                    evicted.append(late.prompt.prompt_id)
        self._entries = [e for e in survivors if e.seq not in dropped]
        return evicted

    # ------------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "config": {
                "capacity": self.config.capacity,
                "conf_floor": self.config.conf_floor,
                "window": self.config.window,
                "iou_dup": self.config.iou_dup,
            },
            "seq": self._seq,
            "entries": [
                {
                    "prompt_id": e.prompt.prompt_id,
                    "descriptor": e.prompt.descriptor.tolist(),
                    "enqueued_at": e.enqueued_at,
                    "seq": e.seq,
                    "source": e.source,
                    "history": list(e.confidence_history),
                    "last_prediction": (
                        e.last_prediction.to_dict() if e.last_prediction else None
                    ),
                }
                for e in self._entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptBuffer":
        buf = cls(BufferConfig(**d["config"]))
        buf._seq = d["seq"]
        for ed in d["entries"]:
            entry = BufferEntry(
                prompt=VisualPrompt(ed["prompt_id"], np.array(ed["descriptor"])),
                enqueued_at=ed["enqueued_at"],
                seq=ed["seq"],
                source=ed["source"],
                confidence_history=deque(ed["history"],
                                         maxlen=buf.config.window),
                last_prediction=(
                    Box3D.from_dict(ed["last_prediction"])
                    if ed["last_prediction"] else None
                ),
            )
            buf._entries.append(entry)
        return buf
