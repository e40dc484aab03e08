"""Scripted, deliberately degraded base detector.

`detect` turns a frame's visible truths into noisy detections, dropping the
ones its miss policy targets. Misses are persistent over 5-frame blocks: the
Bernoulli draw is keyed by (seed, entity, frame // 5, policy), so a missed
object stays missed for the whole block and the pattern is reproducible from
the seed alone. Hit confidences are uniform in [0.5, 0.95]; box centers,
log-sizes and yaw get independent Gaussian noise.

Policies:
* NoMiss         - healthy detector (noise only)
* DistantMiss    - objects beyond a range threshold
* ClassMiss      - objects whose class tag is listed
* UnseenClass    - listed tags are never emitted (structural blindness)
* DomainShift    - every object in frames whose style epsilon crosses a bound
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import Box3D, wrap_angle
from .scenesim import Frame, TruthBox
from .seeding import rng_for

MISS_BLOCK_FRAMES = 5

CONF_LO, CONF_HI = 0.5, 0.95


@dataclass(frozen=True)
class Detection:
    """One detector output; provenance is 'base' or 'prompt:<prompt id>'."""

    box: Box3D
    confidence: float
    provenance: str = "base"
    class_tag: str | None = None

    @property
    def from_prompt(self) -> bool:
        return self.provenance.startswith("prompt:")


class MissPolicy:
    """Decides which truths the degraded detector is blind to."""

    miss_rate: float = 0.0

    def applies(self, truth: TruthBox, frame: Frame) -> bool:
        raise NotImplementedError

    @property
    def tag(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class NoMiss(MissPolicy):
    miss_rate: float = 0.0

    def applies(self, truth, frame):
        return False

    @property
    def tag(self):
        return "none"


@dataclass(frozen=True)
class DistantMiss(MissPolicy):
    range_m: float = 30.0
    miss_rate: float = 0.8

    def applies(self, truth, frame):
        return truth.range_m > self.range_m

    @property
    def tag(self):
        return f"distant:{self.range_m}"


@dataclass(frozen=True)
class ClassMiss(MissPolicy):
    tags: tuple[str, ...] = ()
    miss_rate: float = 0.8

    def applies(self, truth, frame):
        return truth.class_tag in self.tags

    @property
    def tag(self):
        return "class:" + "|".join(sorted(self.tags))


@dataclass(frozen=True)
class UnseenClass(MissPolicy):
    """Listed tags are structurally invisible to the base detector."""

    tags: tuple[str, ...] = ()
    miss_rate: float = 1.0

    def applies(self, truth, frame):
        return truth.class_tag in self.tags

    @property
    def tag(self):
        return "unseen:" + "|".join(sorted(self.tags))


@dataclass(frozen=True)
class DomainShift(MissPolicy):
    epsilon_threshold: float = 0.25
    miss_rate: float = 0.8

    def applies(self, truth, frame):
        return frame.style.epsilon >= self.epsilon_threshold

    @property
    def tag(self):
        return f"shift:{self.epsilon_threshold}"


@dataclass(frozen=True)
class NoiseParams:
    sigma_center: float = 0.15
    sigma_log_size: float = 0.03
    sigma_yaw: float = 0.02


def _missed(policy: MissPolicy, truth: TruthBox, frame: Frame, seed: int) -> bool:
    if not policy.applies(truth, frame):
        return False
    if policy.miss_rate >= 1.0:
        return True
    if policy.miss_rate <= 0.0:
        return False
    block = frame.index // MISS_BLOCK_FRAMES
    u = rng_for(seed, "miss", truth.entity_id, block, policy.tag).uniform()
    return bool(u < policy.miss_rate)


def detect(frame: Frame, policy: MissPolicy, seed: int,
           noise: NoiseParams = NoiseParams()) -> list[Detection]:
    """Noisy detections of the frame's visible truths, minus policy misses.

    Deterministic given (frame, policy, seed, noise); invisible truths are
    never emitted. Output order follows frame.truths.
    """
    out: list[Detection] = []
    for truth in frame.truths:
        if not truth.visible:
            continue
        if _missed(policy, truth, frame, seed):
            continue
        rng = rng_for(seed, "det", truth.entity_id, frame.index)
        dx, dy = rng.normal(0.0, noise.sigma_center, size=2)
        sl, sw, sh = rng.normal(0.0, noise.sigma_log_size, size=3)
        dyaw = rng.normal(0.0, noise.sigma_yaw)
        conf = float(rng.uniform(CONF_LO, CONF_HI))
        b = truth.box
        box = Box3D(
            center=(b.center[0] + dx, b.center[1] + dy, b.center[2]),
            size=(
                b.size[0] * math.exp(sl),
                b.size[1] * math.exp(sw),
                b.size[2] * math.exp(sh),
            ),
            yaw=wrap_angle(b.yaw + dyaw),
        )
        out.append(Detection(box=box, confidence=conf, provenance="base",
                             class_tag=truth.class_tag))
    return out


# ------------------------------------------------------------- serialization


def policy_to_dict(policy: MissPolicy) -> dict:
    if isinstance(policy, NoMiss):
        return {"kind": "none"}
    if isinstance(policy, DistantMiss):
        return {"kind": "distant", "range_m": policy.range_m, "miss_rate": policy.miss_rate}
    if isinstance(policy, ClassMiss):
        return {"kind": "class", "tags": list(policy.tags), "miss_rate": policy.miss_rate}
    if isinstance(policy, UnseenClass):
        return {"kind": "unseen", "tags": list(policy.tags)}
    if isinstance(policy, DomainShift):
        return {
            "kind": "shift",
            "epsilon_threshold": policy.epsilon_threshold,
            "miss_rate": policy.miss_rate,
        }
    raise TypeError(f"unknown policy type {type(policy)!r}")


def policy_from_dict(doc: dict) -> MissPolicy:
    kind = doc.get("kind")
    if kind == "none":
        return NoMiss()
    if kind == "distant":
        return DistantMiss(range_m=doc["range_m"], miss_rate=doc["miss_rate"])
    if kind == "class":
        return ClassMiss(tags=tuple(doc["tags"]), miss_rate=doc["miss_rate"])
    if kind == "unseen":
        return UnseenClass(tags=tuple(doc["tags"]))
    if kind == "shift":
        return DomainShift(
            epsilon_threshold=doc["epsilon_threshold"], miss_rate=doc["miss_rate"]
        )
    raise ValueError(f"unknown policy kind {kind!r}")
