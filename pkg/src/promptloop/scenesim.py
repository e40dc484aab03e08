"""Deterministic ground-plane scene simulator.

A scenario is a seeded cast of entities moving through a world observed by a
moving ego. Each frame renders two ego-centered grid channels:

* appearance (h, w, D): background cells carry low-norm noise, entity cells
  carry the entity's canonical unit descriptor passed through a bounded
  view/style transform. By construction the transformed descriptor keeps
  cosine >= 1 - epsilon_style with its canonical.
* latent (h, w, 8): per covered cell, [du, dv, log l, log w, log h,
  sin yaw_ego, cos yaw_ego, occupancy] plus Gaussian noise; background cells
  are noise around zero. (du, dv) point from the cell center to the entity
  center in grid units. This channel is what the box decoder reads; the
  appearance channel is what prompts match against.

Entities occupying the same cell occlude by distance: the nearer one owns the
cell. An entity alive in a frame but owning no cell is recorded with
visible=False.

Determinism: every random draw is keyed by (scenario seed, purpose, frame,
entity, ...) via seeding.rng_for, so render_frame(scenario, i) is a pure
function of (scenario, i).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Box2D,
    Box3D,
    GridSpec,
    Pose,
    footprint_polygon_grid,
    points_in_convex_polygon,
    wrap_angle,
)
from .seeding import rng_for

SCENARIO_SCHEMA_VERSION = 1

LATENT_DIM = 8

# canonical footprint sizes per class tag (length, width, height), meters;
# kept vehicle-scale so footprints reliably cover grid cells (1.56 m cells)
TAG_SIZES = {
    "car": (4.6, 2.0, 1.6),
    "van": (5.4, 2.3, 2.2),
    "truck": (7.5, 2.8, 3.1),
    "bus": (10.5, 2.9, 3.3),
}


class ScenarioInfeasibleError(ValueError):
    """Raised when a scenario config cannot be realized on its grid."""


@dataclass(frozen=True)
class StyleParams:
    """Bounded appearance perturbation parameters.

    epsilon bounds the cosine deviation (cos >= 1 - epsilon); rotation_seed
    fixes the rotation plane and noise stream; drift salts the noise per
    frame; channel_gains modulate descriptor channels (direction only - the
    applied rotation toward the gained vector is angle-capped).
    """

    rotation_seed: int
    epsilon: float
    channel_gains: tuple[float, ...] = ()
    drift: int = 0


@dataclass
class Entity:
    entity_id: str
    class_tag: str
    size: tuple[float, float, float]
    descriptor: np.ndarray  # (D,), unit norm; shared between twin entities
    spawn_frame: int
    despawn_frame: int  # exclusive
    start_xy: tuple[float, float]  # world position at frame 0's timestamp
    velocity_xy: tuple[float, float]
    yaw: float

    def alive(self, frame: int) -> bool:
        return self.spawn_frame <= frame < self.despawn_frame

    def center_at(self, frame: int, dt: float) -> tuple[float, float]:
        t = frame * dt
        return (
            self.start_xy[0] + self.velocity_xy[0] * t,
            self.start_xy[1] + self.velocity_xy[1] * t,
        )

    def box_at(self, frame: int, dt: float) -> Box3D | None:
        if not self.alive(frame):
            return None
        x, y = self.center_at(frame, dt)
        return Box3D(center=(x, y, self.size[2] / 2), size=self.size, yaw=self.yaw)


@dataclass(frozen=True)
class SpawnSpec:
    """Scripted entity for deterministic scenario construction."""

    entity_id: str
    class_tag: str
    spawn_frame: int
    despawn_frame: int
    start_xy: tuple[float, float]
    velocity_xy: tuple[float, float] = (0.0, 0.0)
    size: tuple[float, float, float] | None = None
    yaw: float | None = None  # default: along velocity (0 if stationary)
    descriptor_group: str | None = None  # shared-appearance twin group


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_frames: int = 40
    n_entities: int = 8
    grid: GridSpec = field(default_factory=GridSpec)
    descriptor_dim: int = 32
    epsilon_style: float = 0.2
    dt: float = 0.5
    ego_speed: float = 3.0
    ego_curvature: float = 0.0  # heading drift per frame, rad
    max_speed: float = 10.0
    pairwise_cos_max: float = 0.5
    background_norm: float = 0.2
    latent_noise_sigma: float = 0.05
    orthogonal_background: bool = True
    style_shift: tuple[int, float] | None = None  # (start frame, epsilon after)
    class_tags: tuple[str, ...] = ("car", "truck", "van")
    spawn_script: tuple[SpawnSpec, ...] | None = None


@dataclass(frozen=True)
class TruthBox:
    entity_id: str
    box: Box3D
    visible: bool
    class_tag: str
    range_m: float  # ground distance from ego


@dataclass
class Frame:
    index: int
    ego: Pose
    truths: list[TruthBox]
    appearance: np.ndarray  # (h, w, D)
    latent: np.ndarray  # (h, w, LATENT_DIM)
    style: StyleParams


@dataclass
class Scenario:
    config: ScenarioConfig
    entities: list[Entity]
    ego_poses: list[Pose]

    def style_for(self, index: int) -> StyleParams:
        eps = self.config.epsilon_style
        if self.config.style_shift is not None and index >= self.config.style_shift[0]:
            eps = self.config.style_shift[1]
        gains = _scenario_gains(self.config)
        return StyleParams(
            rotation_seed=self.config.seed, epsilon=eps, channel_gains=gains, drift=index
        )

    def entity(self, entity_id: str) -> Entity:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise KeyError(entity_id)

    def descriptor_matrix(self) -> np.ndarray:
        """Unique canonical descriptors, one row per distinct array."""
        seen: list[np.ndarray] = []
        for e in self.entities:
            if not any(d is e.descriptor for d in seen):
                seen.append(e.descriptor)
        return np.stack(seen) if seen else np.zeros((0, self.config.descriptor_dim))


# ------------------------------------------------------------ construction


def _scenario_gains(config: ScenarioConfig) -> tuple[float, ...]:
    rng = rng_for(config.seed, "gains")
    g = np.exp(rng.uniform(math.log(0.7), math.log(1.4), size=config.descriptor_dim))
    return tuple(float(x) for x in g)


def sample_separated_descriptors(n: int, dim: int, cos_max: float,
                                 rng: np.random.Generator,
                                 max_tries: int = 10_000) -> np.ndarray:
    """Unit vectors with pairwise cosine <= cos_max, by rejection sampling."""
    out: list[np.ndarray] = []
    tries = 0
    while len(out) < n:
        if tries >= max_tries:
            raise ScenarioInfeasibleError(
                f"could not place {n} descriptors with pairwise cos <= {cos_max}"
            )
        tries += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(np.dot(v, u)) <= cos_max for u in out):
            out.append(v)
    return np.stack(out)


def _default_script(config: ScenarioConfig) -> list[SpawnSpec]:
    """Random lane-based cast: parallel trajectories, no collisions."""
    rng = rng_for(config.seed, "cast")
    lanes = [float(y) for y in range(-27, 28, 6) if y != 0]
    rng.shuffle(lanes)
    specs = []
    tags = list(config.class_tags)
    for i in range(config.n_entities):
        lane = lanes[i % len(lanes)]
        tag = tags[int(rng.integers(len(tags)))]
        base = TAG_SIZES.get(tag, TAG_SIZES["car"])
        scale = float(rng.uniform(0.92, 1.1))
        size = (base[0] * scale, base[1] * scale, base[2] * scale)
        # same-lane entities share the lane speed so they never collide
        speed = float(rng_for(config.seed, "lane-speed", lane).uniform(
            -0.6, 0.6)) * config.max_speed
        slot = i // len(lanes)
        x0 = float(rng.uniform(-35.0, 45.0)) + slot * 60.0
        spawn = 0 if rng.uniform() < 0.7 else int(rng.integers(1, max(2, config.n_frames // 2)))
        despawn = (
            config.n_frames
            if rng.uniform() < 0.8
            else int(rng.integers(config.n_frames // 2, config.n_frames))
        )
        specs.append(
            SpawnSpec(
                entity_id=f"e{i:02d}",
                class_tag=tag,
                spawn_frame=spawn,
                despawn_frame=max(despawn, spawn + 1),
                start_xy=(x0, lane),
                velocity_xy=(speed, 0.0),
                size=size,
                yaw=0.0 if speed >= 0 else math.pi,
            )
        )
    return specs


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Build the deterministic cast and ego path for a config.

    Raises ScenarioInfeasibleError when the cast cannot fit the grid or the
    descriptor separation constraint cannot be met.
    """
    capacity = (config.grid.h * config.grid.w) // 64
    script = list(config.spawn_script) if config.spawn_script else _default_script(config)
    if len(script) > capacity:
        raise ScenarioInfeasibleError(
            f"{len(script)} entities exceed grid capacity {capacity}"
        )
    ids = [s.entity_id for s in script]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate entity ids in spawn script")
    for s in script:
        if math.hypot(*s.velocity_xy) > config.max_speed + 1e-9:
            raise ValueError(
                f"entity {s.entity_id} speed exceeds max_speed {config.max_speed}"
            )
        if not (0 <= s.spawn_frame < s.despawn_frame):
            raise ValueError(f"entity {s.entity_id} has empty alive range")

    # one descriptor per twin group (or per entity when ungrouped)
    groups: list[str] = []
    for s in script:
        key = s.descriptor_group or f"__solo__{s.entity_id}"
        if key not in groups:
            groups.append(key)
    desc = sample_separated_descriptors(
        len(groups), config.descriptor_dim, config.pairwise_cos_max,
        rng_for(config.seed, "descriptors"),
    )
    by_group = {g: desc[i] for i, g in enumerate(groups)}

    entities = []
    for s in script:
        key = s.descriptor_group or f"__solo__{s.entity_id}"
        base = TAG_SIZES.get(s.class_tag, TAG_SIZES["car"])
        size = s.size if s.size is not None else base
        yaw = s.yaw
        if yaw is None:
            vx, vy = s.velocity_xy
            yaw = math.atan2(vy, vx) if (vx, vy) != (0.0, 0.0) else 0.0
        entities.append(
            Entity(
                entity_id=s.entity_id,
                class_tag=s.class_tag,
                size=tuple(float(v) for v in size),
                descriptor=by_group[key],
                spawn_frame=s.spawn_frame,
                despawn_frame=min(s.despawn_frame, config.n_frames),
                start_xy=tuple(float(v) for v in s.start_xy),
                velocity_xy=tuple(float(v) for v in s.velocity_xy),
                yaw=float(yaw),
            )
        )

    poses = []
    x = y = 0.0
    heading = 0.0
    for f in range(config.n_frames):
        poses.append(Pose(x, y, heading))
        heading = wrap_angle(heading + config.ego_curvature)
        x += math.cos(heading) * config.ego_speed * config.dt
        y += math.sin(heading) * config.ego_speed * config.dt
    return Scenario(config=config, entities=entities, ego_poses=poses)


# ------------------------------------------------------------ view transform


def _rotate_toward(x: np.ndarray, target: np.ndarray, angle: float) -> np.ndarray:
    """Rotate unit x toward unit target by `angle` in their common plane."""
    if angle <= 0.0:
        return x
    o = target - float(np.dot(target, x)) * x
    n = float(np.linalg.norm(o))
    if n < 1e-12:
        return x
    return math.cos(angle) * x + math.sin(angle) * (o / n)


def view_transform(descriptor: np.ndarray, style: StyleParams,
                   view_angle: float) -> np.ndarray:
    """Norm-preserving bounded perturbation of a unit descriptor.

    Composition of three capped rotations (view-plane rotation scaled by
    |sin(view_angle / 2)|, rotation toward the channel-gained direction, and
    seeded noise rotation) whose angle budgets sum to arccos(1 - epsilon), so
    cosine(descriptor, output) >= 1 - epsilon holds by construction. A pure
    function of its arguments.
    """
    x = np.asarray(descriptor, dtype=float)
    nrm = float(np.linalg.norm(x))
    if nrm < 1e-12:
        raise ValueError("descriptor must be nonzero")
    x = x / nrm
    eps = style.epsilon
    if eps <= 0.0:
        return x
    alpha = math.acos(max(-1.0, 1.0 - eps)) * (1.0 - 1e-9)

    # view rotation in a fixed seeded plane
    plane_rng = rng_for(style.rotation_seed, "plane")
    e1 = plane_rng.normal(size=x.shape[0])
    e1 /= np.linalg.norm(e1)
    e2 = plane_rng.normal(size=x.shape[0])
    e2 -= float(np.dot(e2, e1)) * e1
    e2 /= np.linalg.norm(e2)
    theta_v = 0.5 * alpha * abs(math.sin(view_angle / 2.0))
    a, b = float(np.dot(x, e1)), float(np.dot(x, e2))
    c, s = math.cos(theta_v), math.sin(theta_v)
    y = x + (a * c - b * s - a) * e1 + (a * s + b * c - b) * e2
    y /= np.linalg.norm(y)

    # capped rotation toward the channel-gained direction
    if style.channel_gains:
        g = np.asarray(style.channel_gains, dtype=float)
        gy = g * y
        gn = float(np.linalg.norm(gy))
        if gn > 1e-12:
            t = gy / gn
            ang = math.acos(min(1.0, max(-1.0, float(np.dot(y, t)))))
            y = _rotate_toward(y, t, min(ang, 0.2 * alpha))

    # seeded noise rotation toward a random orthogonal direction
    noise_rng = rng_for(
        style.rotation_seed, "noise", style.drift, float(view_angle),
        np.ascontiguousarray(x),
    )
    n = noise_rng.normal(size=x.shape[0])
    theta_n = 0.3 * alpha * float(noise_rng.uniform())
    y = _rotate_toward(y, n / np.linalg.norm(n), theta_n)
    return y / np.linalg.norm(y)


def styled_descriptor(descriptor: np.ndarray, seed: int, epsilon: float) -> np.ndarray:
    """A foreign-style rendition of a canonical descriptor (e.g. a prompt
    sourced outside the scenario's own style regime)."""
    rng = rng_for(seed, "foreign-style")
    gains = tuple(
        float(x) for x in np.exp(rng.uniform(math.log(0.7), math.log(1.4),
                                             size=np.asarray(descriptor).shape[0]))
    )
    style = StyleParams(rotation_seed=seed, epsilon=epsilon,
                        channel_gains=gains, drift=0)
    angle = float(rng.uniform(-math.pi, math.pi))
    return view_transform(descriptor, style, angle)


# ---------------------------------------------------------------- rendering


def _covered_cells(box: Box3D, ego: Pose, grid: GridSpec):
    """(iu, iv) integer arrays of cells whose centers fall in the footprint."""
    poly = footprint_polygon_grid(box, ego, grid)
    lo_u = max(int(math.floor(poly[:, 0].min())), 0)
    hi_u = min(int(math.ceil(poly[:, 0].max())), grid.w - 1)
    lo_v = max(int(math.floor(poly[:, 1].min())), 0)
    hi_v = min(int(math.ceil(poly[:, 1].max())), grid.h - 1)
    if hi_u < lo_u or hi_v < lo_v:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    ius = np.arange(lo_u, hi_u + 1)
    ivs = np.arange(lo_v, hi_v + 1)
    gu, gv = np.meshgrid(ius, ivs)
    centers = np.column_stack([gu.ravel() + 0.5, gv.ravel() + 0.5])
    # winding may be clockwise in grid coords if the v axis flips orientation
    area2 = 0.0
    for i in range(4):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % 4]
        area2 += x0 * y1 - x1 * y0
    pp = poly if area2 >= 0 else poly[::-1]
    mask = points_in_convex_polygon(centers, pp)
    return gu.ravel()[mask], gv.ravel()[mask]


def render_frame(scenario: Scenario, index: int) -> Frame:
    """Render the appearance and latent grids for one frame."""
    cfg = scenario.config
    if not 0 <= index < cfg.n_frames:
        raise IndexError(f"frame {index} outside [0, {cfg.n_frames})")
    grid = cfg.grid
    ego = scenario.ego_poses[index]
    style = scenario.style_for(index)
    h, w, d = grid.h, grid.w, cfg.descriptor_dim

    bg = rng_for(cfg.seed, "bg", index).normal(size=(h, w, d))
    if cfg.orthogonal_background:
        basis = scenario.descriptor_matrix()
        if len(basis):
            q, _ = np.linalg.qr(basis.T)  # (d, k) orthonormal
            flat = bg.reshape(-1, d)
            flat -= (flat @ q) @ q.T
            bg = flat.reshape(h, w, d)
    norms = np.linalg.norm(bg, axis=2, keepdims=True)
    appearance = bg * (cfg.background_norm / np.maximum(norms, 1e-12))

    latent = rng_for(cfg.seed, "latent-noise", index).normal(
        0.0, cfg.latent_noise_sigma, size=(h, w, LATENT_DIM)
    )

    alive = [e for e in scenario.entities if e.alive(index)]
    order = sorted(
        alive,
        key=lambda e: -math.hypot(
            e.center_at(index, cfg.dt)[0] - ego.x,
            e.center_at(index, cfg.dt)[1] - ego.y,
        ),
    )
    owner = np.full((h, w), -1, dtype=int)
    for k, e in enumerate(order):
        box = e.box_at(index, cfg.dt)
        ius, ivs = _covered_cells(box, ego, grid)
        if len(ius) == 0:
            continue
        center_uv = grid.world_to_grid(
            np.array([box.center[0], box.center[1]]), ego
        )
        e_ego = ego.world_to_ego(np.array([box.center[0], box.center[1]]))
        bearing = math.atan2(e_ego[1], e_ego[0])
        vec = view_transform(e.descriptor, style, bearing)
        appearance[ivs, ius, :] = vec
        yaw_ego = wrap_angle(box.yaw - ego.heading)
        enc = np.empty((len(ius), LATENT_DIM))
        enc[:, 0] = center_uv[0] - (ius + 0.5)
        enc[:, 1] = center_uv[1] - (ivs + 0.5)
        enc[:, 2] = math.log(box.size[0])
        enc[:, 3] = math.log(box.size[1])
        enc[:, 4] = math.log(box.size[2])
        enc[:, 5] = math.sin(yaw_ego)
        enc[:, 6] = math.cos(yaw_ego)
        enc[:, 7] = 1.0
        noise = rng_for(cfg.seed, "latent", index, e.entity_id).normal(
            0.0, cfg.latent_noise_sigma, size=enc.shape
        )
        latent[ivs, ius, :] = enc + noise
        owner[ivs, ius] = k

    truths = []
    for k, e in enumerate(order):
        box = e.box_at(index, cfg.dt)
        visible = bool(np.any(owner == k))
        rng_m = math.hypot(box.center[0] - ego.x, box.center[1] - ego.y)
        truths.append(TruthBox(e.entity_id, box, visible, e.class_tag, rng_m))
    truths.sort(key=lambda t: t.entity_id)
    return Frame(
        index=index, ego=ego, truths=truths,
        appearance=appearance, latent=latent, style=style,
    )


def crop_descriptor(frame: Frame, box: Box2D) -> np.ndarray:
    """Renormalized mean of the appearance cells whose centers lie in `box`.

    Falls back to the single cell containing the box center when the box is
    thinner than a cell; raises ValueError if the box misses the grid
    entirely.
    """
    h, w = frame.appearance.shape[:2]
    lo_u, lo_v = box.lo
    hi_u, hi_v = box.hi
    if hi_u <= 0 or hi_v <= 0 or lo_u >= w or lo_v >= h:
        raise ValueError("crop box lies outside the grid")
    iu0 = max(int(math.ceil(lo_u - 0.5)), 0)
    iu1 = min(int(math.floor(hi_u - 0.5)), w - 1)
    iv0 = max(int(math.ceil(lo_v - 0.5)), 0)
    iv1 = min(int(math.floor(hi_v - 0.5)), h - 1)
    if iu1 < iu0 or iv1 < iv0:
        cu = min(max(box.center[0], 0.0), w - 1e-9)
        cv = min(max(box.center[1], 0.0), h - 1e-9)
        iu0 = iu1 = int(cu)
        iv0 = iv1 = int(cv)
    patch = frame.appearance[iv0 : iv1 + 1, iu0 : iu1 + 1, :]
    mean = patch.reshape(-1, patch.shape[-1]).mean(axis=0)
    return mean / max(float(np.linalg.norm(mean)), 1e-12)


# ------------------------------------------------------------- persistence


def scenario_to_dict(s: Scenario) -> dict:
    cfg = s.config
    return {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "config": {
            "seed": cfg.seed,
            "n_frames": cfg.n_frames,
            "n_entities": cfg.n_entities,
            "grid": {"h": cfg.grid.h, "w": cfg.grid.w, "extent": cfg.grid.extent},
            "descriptor_dim": cfg.descriptor_dim,
            "epsilon_style": cfg.epsilon_style,
            "dt": cfg.dt,
            "ego_speed": cfg.ego_speed,
            "ego_curvature": cfg.ego_curvature,
            "max_speed": cfg.max_speed,
            "pairwise_cos_max": cfg.pairwise_cos_max,
            "background_norm": cfg.background_norm,
            "latent_noise_sigma": cfg.latent_noise_sigma,
            "orthogonal_background": cfg.orthogonal_background,
            "style_shift": list(cfg.style_shift) if cfg.style_shift else None,
            "class_tags": list(cfg.class_tags),
        },
        "entities": [
            {
                "entity_id": e.entity_id,
                "class_tag": e.class_tag,
                "size": list(e.size),
                "descriptor": e.descriptor.tolist(),
                "spawn_frame": e.spawn_frame,
                "despawn_frame": e.despawn_frame,
                "start_xy": list(e.start_xy),
                "velocity_xy": list(e.velocity_xy),
                "yaw": e.yaw,
            }
            for e in s.entities
        ],
        "ego_poses": [[p.x, p.y, p.heading] for p in s.ego_poses],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    if doc.get("schema_version") != SCENARIO_SCHEMA_VERSION:
        raise ValueError(f"unsupported scenario schema {doc.get('schema_version')!r}")
    c = doc["config"]
    cfg = ScenarioConfig(
        seed=c["seed"],
        n_frames=c["n_frames"],
        n_entities=c["n_entities"],
        grid=GridSpec(**c["grid"]),
        descriptor_dim=c["descriptor_dim"],
        epsilon_style=c["epsilon_style"],
        dt=c["dt"],
        ego_speed=c["ego_speed"],
        ego_curvature=c["ego_curvature"],
        max_speed=c["max_speed"],
        pairwise_cos_max=c["pairwise_cos_max"],
        background_norm=c["background_norm"],
        latent_noise_sigma=c["latent_noise_sigma"],
        orthogonal_background=c["orthogonal_background"],
        style_shift=tuple(c["style_shift"]) if c["style_shift"] else None,
        class_tags=tuple(c["class_tags"]),
    )
    entities = [
        Entity(
            entity_id=e["entity_id"],
            class_tag=e["class_tag"],
            size=tuple(e["size"]),
            descriptor=np.array(e["descriptor"], dtype=float),
            spawn_frame=e["spawn_frame"],
            despawn_frame=e["despawn_frame"],
            start_xy=tuple(e["start_xy"]),
            velocity_xy=tuple(e["velocity_xy"]),
            yaw=e["yaw"],
        )
        for e in doc["entities"]
    ]
    poses = [Pose(*p) for p in doc["ego_poses"]]
    return Scenario(config=cfg, entities=entities, ego_poses=poses)


def save_scenario(path: str, s: Scenario) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(scenario_to_dict(s), f)


def load_scenario(path: str) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(json.load(f))


# ---------------------------------------------------------------- presets


def three_phase_config(seed: int = 0, n_frames: int = 40) -> ScenarioConfig:
    """Scripted convoy with a fill / hold / drain population profile.

    Six cars ride along with the ego at fixed near-field offsets, entering
    staggered over the first quarter of the episode, persisting through the
    middle, and leaving one by one well before the end. Constant range keeps
    per-entity signal steady, so the population profile — not range drift —
    is the only thing anything tracking the cast (e.g. a prompt buffer
    trace) can respond to, and the early exits leave room for a bounded
    eviction window to drain completely.
    """
    third = n_frames // 3
    ego_speed = 3.0
    dt = 0.5
    script = []
    lanes = [-12.0, -6.0, 6.0, 12.0, -18.0, 18.0]
    ahead = [8.0, 12.0, 10.0, 14.0, 9.0, 13.0]
    for i in range(6):
        spawn = min(2 * i, third)
        despawn = n_frames - 8 - 2 * (5 - i)
        script.append(
            SpawnSpec(
                entity_id=f"p{i}",
                class_tag="car",
                spawn_frame=spawn,
                despawn_frame=max(despawn, spawn + third),
                start_xy=(ego_speed * dt * spawn + ahead[i], lanes[i]),
                velocity_xy=(ego_speed, 0.0),
            )
        )
    return ScenarioConfig(
        seed=seed,
        n_frames=n_frames,
        n_entities=len(script),
        ego_speed=ego_speed,
        dt=dt,
        spawn_script=tuple(script),
    )
