"""Prompt adapter: aligns prompts to frame grids and decodes 3D boxes.

The adapter owns every trainable piece of the correction loop:

* a prompt encoder embedding crop descriptors into query space,
* two projection heads (prompt side / image side) whose cosine similarity
  produces a per-prompt match map over the appearance grid,
* a locator head that shapes per-candidate soft-argmax readouts around the
  top similarity peaks, yielding N position candidates per visual prompt,
* a box decoder that turns (query embedding + pooled latent cells) into a
  3D box with a confidence,
* linear lifts embedding point/box prompt position codes into query space.

Queries follow `embedding = positional_code(position) + prompt_embedding`, so
the difference between two candidate queries of the same prompt is exactly
the difference of their positional codes.

Position candidates come from the similarity map itself (greedy peaks, then a
locator-tempered local soft-argmax), never from absolute coordinates, so the
whole alignment is equivariant under grid mirroring. Localization trains on
the min-loss candidate only; the other candidates receive bitwise-zero
position gradients.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nnkit
from .geometry import Box2D, Box3D, GridSpec, Pose, project_to_grid, wrap_angle
from .nnkit import GradientTape, Network, dense_network, dice_loss, focal_loss, smooth_l1
from .scenesim import LATENT_DIM, Frame, Scenario, crop_descriptor, render_frame
from .seeding import rng_for

DECODE_DIM = 8  # du, dv, log l, log w, log h, sin yaw, cos yaw, conf logit

NET_NAMES = (
    "prompt_encoder",
    "proj_prompt",
    "proj_image",
    "locator",
    "decoder",
    "point_lift",
    "box_lift",
)


@dataclass(frozen=True)
class AdapterConfig:
    descriptor_dim: int = 32
    bands: int = 8
    freq_lo: float = 1.0
    freq_hi: float = 64.0
    n_candidates: int = 4
    proj_hidden: int = 128
    proj_out: int = 64
    encoder_hidden: int = 64
    locator_hidden: int = 64
    decoder_hidden: int = 64
    n_object_queries: int = 0
    grid_h: int = 64
    grid_w: int = 64
    grid_extent: float = 100.0
    squash_alpha: float = 18.0
    kappa_floor: float = 1.0
    peak_suppression_radius: int = 5
    window_radius: int = 3
    pool_eps: float = 1e-6
    # smoothing of the cosine denominator: sqrt((|p|^2+eps^2)(|q|^2+eps^2)).
    # Keeps |S| <= 1 while damping (rather than amplifying) cells whose
    # projected features vanish, which would otherwise blow up curvature.
    cosine_eps: float = 0.05
    w_focal: float = 1.0
    w_dice: float = 1.0
    w_loc: float = 2.0
    w_decode: float = 2.0

    def __post_init__(self):
        if 4 * self.bands != self.descriptor_dim:
            raise ValueError(
                "positional code of a 2-D point (4 * bands) must equal "
                f"descriptor_dim; got bands={self.bands}, dim={self.descriptor_dim}"
            )
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(h=self.grid_h, w=self.grid_w, extent=self.grid_extent)


@dataclass(frozen=True)
class VisualPrompt:
    prompt_id: str
    descriptor: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "descriptor", np.asarray(self.descriptor, dtype=float)
        )


@dataclass(frozen=True)
class PointPrompt:
    uv: tuple[float, float]


@dataclass(frozen=True)
class BoxPrompt:
    box: Box2D


@dataclass
class PromptSet:
    boxes: list[BoxPrompt] = field(default_factory=list)
    points: list[PointPrompt] = field(default_factory=list)
    visuals: list[VisualPrompt] = field(default_factory=list)


@dataclass
class Query:
    kind: str  # object | box | point | visual
    embedding: np.ndarray  # (D,)
    position: np.ndarray  # (2,) grid units
    prompt_id: str | None = None
    candidate_index: int = 0
    weight_row: np.ndarray | None = None  # squashed similarity over cells


@dataclass
class AlignResult:
    """Per-prompt similarity map and candidate readouts.

    similarity: (M, h*w) raw cosine values in [-1, 1]
    positions:  (M, N, 2) candidate grid positions
    pooled:     (M, N, D) similarity-weighted appearance around each candidate
    peaks:      (M, N) flat cell index of each candidate's seed peak
    kappa/blend: (M, N) locator outputs shaping each readout
    """

    similarity: np.ndarray
    positions: np.ndarray
    pooled: np.ndarray
    peaks: np.ndarray
    kappa: np.ndarray
    blend: np.ndarray

    @property
    def n_prompts(self) -> int:
        return self.similarity.shape[0]


@dataclass
class AlignLosses:
    total: float
    focal: float
    dice: float
    loc: float
    chosen: np.ndarray  # (M,) index of the min-loss candidate per prompt


@dataclass
class AdapterParams:
    config: AdapterConfig
    nets: dict[str, Network]
    object_queries: np.ndarray  # (Q, D)
    object_anchors: np.ndarray  # (Q, 2) grid units

    def networks(self) -> dict[str, Network]:
        return self.nets

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            config=self.config,
            nets={k: n.copy() for k, n in self.nets.items()},
            object_queries=self.object_queries.copy(),
            object_anchors=self.object_anchors.copy(),
        )


def init_adapter(config: AdapterConfig, seed: int = 0) -> AdapterParams:
    d = config.descriptor_dim
    rng = rng_for(seed, "adapter-init")
    nets = {
        "prompt_encoder": dense_network([d, config.encoder_hidden, d], rng),
        "proj_prompt": dense_network([d, config.proj_hidden, config.proj_out], rng),
        "locator": dense_network([d, config.locator_hidden, 2 * config.n_candidates], rng),
        "decoder": dense_network([d + LATENT_DIM, config.decoder_hidden, DECODE_DIM], rng),
        "point_lift": dense_network([4 * config.bands, d], rng),
        "box_lift": dense_network([8 * config.bands, d], rng),
    }
    # The encoder is residual (z_v = desc + net(desc)); zeroing its output
    # layer makes z_v start at the raw descriptor. Twinning the projections
    # makes the initial similarity a shared random projection of both sides,
    # which preserves the descriptor-cosine ordering the simulator guarantees.
    # Training then only has to refine an already-sane map.
    last = nets["prompt_encoder"].layers[-1]
    last.weights[:] = 0.0
    last.biases[:] = 0.0
    nets["proj_image"] = nets["proj_prompt"].copy()
    q = config.n_object_queries
    queries = rng.normal(0.0, 0.2, size=(q, d))
    anchors = np.column_stack(
        [rng.uniform(0, config.grid_w, size=q), rng.uniform(0, config.grid_h, size=q)]
    ) if q else np.zeros((0, 2))
    return AdapterParams(config=config, nets=nets,
                         object_queries=queries, object_anchors=anchors)


# ------------------------------------------------------------ positional code


def fourier_pe(coords: np.ndarray, bands: int, freq_lo: float = 1.0,
               freq_hi: float = 64.0) -> np.ndarray:
    """Sin/cos features of normalized coordinates at log-spaced frequencies.

    coords (..., k) in [0, 1] nominally (values outside are fine). Output is
    (..., 2 * k * bands), grouped coordinate-major: for each coordinate, for
    each band, [sin, cos].
    """
    c = np.asarray(coords, dtype=float)
    if bands < 1:
        raise ValueError("bands must be >= 1")
    if bands == 1:
        freqs = np.array([freq_lo])
    else:
        ratio = freq_hi / freq_lo
        freqs = freq_lo * ratio ** (np.arange(bands) / (bands - 1))
    ang = 2.0 * math.pi * c[..., :, None] * freqs  # (..., k, bands)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., k, bands, 2)
    return out.reshape(*c.shape[:-1], c.shape[-1] * bands * 2)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _softplus(x):
    return np.logaddexp(0.0, x)


# ------------------------------------------------------------ prompt encoding


def encode_point_prompt(uv, params: AdapterParams) -> Query:
    """Click position -> query; raises if the point is outside the grid."""
    cfg = params.config
    u, v = float(uv[0]), float(uv[1])
    if not (0.0 <= u <= cfg.grid_w and 0.0 <= v <= cfg.grid_h):
        raise ValueError(f"point ({u}, {v}) outside grid")
    pe = fourier_pe(np.array([u / cfg.grid_w, v / cfg.grid_h]),
                    cfg.bands, cfg.freq_lo, cfg.freq_hi)
    emb = params.nets["point_lift"].forward(pe)
    return Query(kind="point", embedding=emb, position=np.array([u, v]))


def encode_box_prompt(box: Box2D, params: AdapterParams) -> Query:
    """2D grid box -> query; raises if the box misses the grid entirely."""
    cfg = params.config
    cu, cv = box.center
    if not (0.0 <= cu <= cfg.grid_w and 0.0 <= cv <= cfg.grid_h):
        raise ValueError(f"box center ({cu}, {cv}) outside grid")
    feats = np.array([
        cu / cfg.grid_w, cv / cfg.grid_h,
        box.extent[0] / cfg.grid_w, box.extent[1] / cfg.grid_h,
    ])
    pe = fourier_pe(feats, cfg.bands, cfg.freq_lo, cfg.freq_hi)
    emb = params.nets["box_lift"].forward(pe)
    return Query(kind="box", embedding=emb, position=np.array([cu, cv]))


# ------------------------------------------------------------------ alignment


def _check_frame(frame: Frame, cfg: AdapterConfig):
    h, w, d = frame.appearance.shape
    if (h, w) != (cfg.grid_h, cfg.grid_w) or d != cfg.descriptor_dim:
        raise ValueError(
            f"frame grid {(h, w, d)} does not match adapter config "
            f"{(cfg.grid_h, cfg.grid_w, cfg.descriptor_dim)}"
        )


def _greedy_peaks(smap: np.ndarray, n: int, radius: int) -> np.ndarray:
    """Flat indices of n greedy local maxima with Chebyshev suppression."""
    h, w = smap.shape
    work = smap.copy()
    out = np.empty(n, dtype=int)
    for i in range(n):
        flat = int(np.argmax(work))
        out[i] = flat
        iv, iu = divmod(flat, w)
        v0, v1 = max(iv - radius, 0), min(iv + radius + 1, h)
        u0, u1 = max(iu - radius, 0), min(iu + radius + 1, w)
        work[v0:v1, u0:u1] = -np.inf
    return out


def _window_cells(flat: int, h: int, w: int, radius: int):
    iv, iu = divmod(int(flat), w)
    ivs = np.arange(max(iv - radius, 0), min(iv + radius + 1, h))
    ius = np.arange(max(iu - radius, 0), min(iu + radius + 1, w))
    gv, gu = np.meshgrid(ivs, ius, indexing="ij")
    cells = (gv * w + gu).ravel()
    centers = np.column_stack([gu.ravel() + 0.5, gv.ravel() + 0.5])
    return cells, centers


@dataclass
class _AlignCache:
    """Every intermediate needed to backprop the alignment head."""

    descriptors: np.ndarray
    grid_flat: np.ndarray  # (HW, D) appearance rows
    z_v: np.ndarray  # (M, D) encoder output
    p: np.ndarray  # (M, proj_out)
    q: np.ndarray  # (HW, proj_out)
    pd: np.ndarray  # smoothed row norms of p
    qd: np.ndarray  # smoothed row norms of q
    s: np.ndarray  # (M, HW) cosine
    u: np.ndarray  # (M, HW) squashed
    pool_t: np.ndarray  # (M,) pooling normalizer
    pooled_g: np.ndarray  # (M, D)
    mods: np.ndarray  # (M, 2N) locator raw output
    kappa: np.ndarray
    blend: np.ndarray
    peaks: np.ndarray
    windows: list  # per (m, i): (cells, centers, weights, raw_uv)
    result: AlignResult


def _align_forward(descs: np.ndarray, frame: Frame,
                   params: AdapterParams) -> _AlignCache:
    cfg = params.config
    _check_frame(frame, cfg)
    m = descs.shape[0]
    h, w = cfg.grid_h, cfg.grid_w
    n = cfg.n_candidates
    grid_flat = frame.appearance.reshape(-1, cfg.descriptor_dim)

    # residual: the encoder refines the raw prompt descriptor
    z_v = descs + params.nets["prompt_encoder"].forward(descs) \
        if m else np.zeros((0, cfg.descriptor_dim))
    p = params.nets["proj_prompt"].forward(z_v) if m else np.zeros((0, cfg.proj_out))
    q = params.nets["proj_image"].forward(grid_flat)
    eps2 = cfg.cosine_eps**2
    pd = np.sqrt((p**2).sum(axis=1) + eps2) if m else np.zeros(0)
    qd = np.sqrt((q**2).sum(axis=1) + eps2)
    s = (p @ q.T) / (pd[:, None] * qd[None, :]) if m else np.zeros((0, q.shape[0]))
    u = _sigmoid(cfg.squash_alpha * s)

    pool_t = u.sum(axis=1) + cfg.pool_eps if m else np.zeros(0)
    pooled_g = (u @ grid_flat) / pool_t[:, None] if m else np.zeros((0, cfg.descriptor_dim))
    mods = params.nets["locator"].forward(pooled_g) if m else np.zeros((0, 2 * n))
    kappa = _softplus(mods[:, 0::2]) + cfg.kappa_floor
    blend = np.tanh(mods[:, 1::2])

    peaks = np.zeros((m, n), dtype=int)
    positions = np.zeros((m, n, 2))
    pooled = np.zeros((m, n, cfg.descriptor_dim))
    windows = []
    for mi in range(m):
        smap = s[mi].reshape(h, w)
        pk = _greedy_peaks(smap, n, cfg.peak_suppression_radius)
        peaks[mi] = pk
        row_w = []
        for ci in range(n):
            cells, centers = _window_cells(pk[ci], h, w, cfg.window_radius)
            logits = kappa[mi, ci] * s[mi, cells]
            ex = np.exp(logits - logits.max())
            wts = ex / ex.sum()
            raw = wts @ centers
            iv, iu = divmod(int(pk[ci]), w)
            center = np.array([iu + 0.5, iv + 0.5])
            positions[mi, ci] = center + (1.0 + blend[mi, ci]) * (raw - center)
            # similarity-weighted appearance pool over a 3x3 patch at the
            # candidate (informational; not part of any loss)
            pcells, _ = _window_cells(pk[ci], h, w, 1)
            uw = u[mi, pcells]
            pooled[mi, ci] = (uw @ grid_flat[pcells]) / (uw.sum() + cfg.pool_eps)
            row_w.append((cells, centers, wts, raw))
        windows.append(row_w)

    result = AlignResult(
        similarity=s, positions=positions, pooled=pooled,
        peaks=peaks, kappa=kappa, blend=blend,
    )
    return _AlignCache(
        descriptors=descs, grid_flat=grid_flat, z_v=z_v, p=p, q=q, pd=pd, qd=qd,
        s=s, u=u, pool_t=pool_t, pooled_g=pooled_g, mods=mods,
        kappa=kappa, blend=blend, peaks=peaks, windows=windows, result=result,
    )


def align(prompts: list[VisualPrompt], frame: Frame,
          params: AdapterParams) -> AlignResult:
    """Match visual prompts against a frame's appearance grid.

    Returns an AlignResult with M = len(prompts) rows; an empty prompt list
    yields a well-formed empty result.
    """
    cfg = params.config
    if prompts:
        descs = np.stack([p.descriptor for p in prompts])
        if descs.shape[1] != cfg.descriptor_dim:
            raise ValueError("prompt descriptor dimension mismatch")
    else:
        descs = np.zeros((0, cfg.descriptor_dim))
    return _align_forward(descs, frame, params).result


def mask_from_box(box: Box2D, h: int, w: int) -> np.ndarray:
    """(h*w,) binary mask of cells whose centers lie inside the 2D box."""
    us = np.arange(w) + 0.5
    vs = np.arange(h) + 0.5
    mu = (us >= box.lo[0]) & (us <= box.hi[0])
    mv = (vs >= box.lo[1]) & (vs <= box.hi[1])
    return (mv[:, None] & mu[None, :]).astype(float).ravel()


def alignment_loss(result: AlignResult, target_boxes: list[Box2D],
                   cfg: AdapterConfig):
    """Similarity + localization loss of an alignment against target boxes.

    Returns (AlignLosses, d_similarity, d_positions) where the gradients are
    of the weighted total w.r.t. the raw similarity map and the candidate
    positions. Only each prompt's min-loss candidate carries a position
    gradient; the rest stay bitwise zero.
    """
    m = result.n_prompts
    if len(target_boxes) != m:
        raise ValueError("need one target box per prompt")
    h, w = cfg.grid_h, cfg.grid_w
    ds = np.zeros_like(result.similarity)
    dpos = np.zeros_like(result.positions)
    chosen = np.zeros(m, dtype=int)
    if m == 0:
        return AlignLosses(0.0, 0.0, 0.0, 0.0, chosen), ds, dpos

    u = _sigmoid(cfg.squash_alpha * result.similarity)
    f_total = d_total = l_total = 0.0
    for mi in range(m):
        mask = mask_from_box(target_boxes[mi], h, w)
        f, df = focal_loss(u[mi], mask)
        dc, ddc = dice_loss(u[mi], mask)
        du = (cfg.w_focal * df + cfg.w_dice * ddc) / m
        ds[mi] = du * cfg.squash_alpha * u[mi] * (1.0 - u[mi])
        f_total += f / m
        d_total += dc / m

        target = np.array(target_boxes[mi].center)
        per_cand = []
        for ci in range(result.positions.shape[1]):
            val, _ = smooth_l1(result.positions[mi, ci], target, reduction="sum")
            per_cand.append(val)
        ci = int(np.argmin(per_cand))
        chosen[mi] = ci
        val, grad = smooth_l1(result.positions[mi, ci], target, reduction="sum")
        l_total += val / m
        dpos[mi, ci] = cfg.w_loc * grad / m

    total = cfg.w_focal * f_total + cfg.w_dice * d_total + cfg.w_loc * l_total
    return AlignLosses(total, f_total, d_total, l_total, chosen), ds, dpos


def _align_backward(cache: _AlignCache, ds_extra: np.ndarray,
                    dpos: np.ndarray, dz_v_extra: np.ndarray,
                    params: AdapterParams):
    """Chain alignment-head gradients into per-network tapes.

    ds_extra: (M, HW) gradient w.r.t. raw similarity (losses on the map).
    dpos:     (M, N, 2) gradient w.r.t. candidate positions.
    dz_v_extra: (M, D) extra gradient into the encoder output (decode path).
    """
    cfg = params.config
    m, n = cache.kappa.shape
    ds = ds_extra.copy()
    dkappa = np.zeros((m, n))
    dblend = np.zeros((m, n))
    w = cfg.grid_w

    for mi in range(m):
        for ci in range(n):
            g = dpos[mi, ci]
            if not np.any(g):
                continue
            cells, centers, wts, raw = cache.windows[mi][ci]
            iv, iu = divmod(int(cache.peaks[mi, ci]), w)
            center = np.array([iu + 0.5, iv + 0.5])
            dblend[mi, ci] += float(np.dot(raw - center, g))
            draw = (1.0 + cache.blend[mi, ci]) * g
            proj = (centers - raw) @ draw  # (cells,)
            svals = cache.s[mi, cells]
            ds[mi, cells] += cache.kappa[mi, ci] * wts * proj
            mean_s = float(wts @ svals)
            dkappa[mi, ci] += float((wts * svals) @ proj) - mean_s * float(wts @ proj)

    dmods = np.zeros_like(cache.mods)
    dmods[:, 0::2] = dkappa * _sigmoid(cache.mods[:, 0::2])  # softplus'
    dmods[:, 1::2] = dblend * (1.0 - cache.blend**2)
    tapes: dict[str, GradientTape] = {}
    if m:
        tape_loc = params.nets["locator"].backward(dmods)
        tapes["locator"] = tape_loc
        dpooled_g = tape_loc.input

        # pooled_g = (u @ G) / t  ->  du and (data-side, discarded) dG
        du_pool = (cache.grid_flat @ dpooled_g.T).T / cache.pool_t[:, None]
        du_pool -= ((cache.pooled_g * dpooled_g).sum(axis=1) / cache.pool_t)[:, None]
        ds += du_pool * cfg.squash_alpha * cache.u * (1.0 - cache.u)

        # smoothed-cosine backward: s = (p . q) / (pd * qd)
        pd, qd = cache.pd, cache.qd
        row_dot = (ds * cache.s).sum(axis=1)
        dp = (ds @ (cache.q / qd[:, None])) / pd[:, None] \
            - (row_dot / pd**2)[:, None] * cache.p
        col_dot = (ds * cache.s).sum(axis=0)
        dq = (ds.T @ (cache.p / pd[:, None])) / qd[:, None] \
            - (col_dot / qd**2)[:, None] * cache.q

        tape_pp = params.nets["proj_prompt"].backward(dp)
        tapes["proj_prompt"] = tape_pp
        tapes["proj_image"] = params.nets["proj_image"].backward(dq)
        dz_v = tape_pp.input + dz_v_extra
        tapes["prompt_encoder"] = params.nets["prompt_encoder"].backward(dz_v)
    return tapes


# -------------------------------------------------------------------- decode


def build_queries(prompt_set: PromptSet, frame: Frame, params: AdapterParams,
                  align_result: AlignResult | None = None) -> list[Query]:
    """Combined query list: object queries first, then box, point and visual
    prompt queries in input order (N candidates per visual prompt).

    Pass a precomputed `align_result` for the visual prompts to avoid
    re-running alignment; it must have one row per visual prompt.
    """
    cfg = params.config
    _check_frame(frame, cfg)
    queries: list[Query] = []
    for qi in range(params.object_queries.shape[0]):
        queries.append(
            Query(
                kind="object",
                embedding=params.object_queries[qi],
                position=params.object_anchors[qi].copy(),
            )
        )
    for bp in prompt_set.boxes:
        queries.append(encode_box_prompt(bp.box, params))
    for pp in prompt_set.points:
        queries.append(encode_point_prompt(pp.uv, params))
    if prompt_set.visuals:
        res = align_result
        if res is None:
            res = align(prompt_set.visuals, frame, params)
        if res.n_prompts != len(prompt_set.visuals):
            raise ValueError("align_result rows do not match visual prompts")
        u = _sigmoid(cfg.squash_alpha * res.similarity)
        descs = np.stack([p.descriptor for p in prompt_set.visuals])
        z_v = descs + params.nets["prompt_encoder"].forward(descs)
        for mi, vp in enumerate(prompt_set.visuals):
            for ci in range(cfg.n_candidates):
                pos = res.positions[mi, ci]
                pe = fourier_pe(
                    np.array([pos[0] / cfg.grid_w, pos[1] / cfg.grid_h]),
                    cfg.bands, cfg.freq_lo, cfg.freq_hi,
                )
                queries.append(
                    Query(
                        kind="visual",
                        embedding=pe + z_v[mi],
                        position=pos.copy(),
                        prompt_id=vp.prompt_id,
                        candidate_index=ci,
                        weight_row=u[mi],
                    )
                )
    return queries


def _pool_latent(frame: Frame, pos: np.ndarray, weight_row: np.ndarray | None,
                 cfg: AdapterConfig) -> np.ndarray:
    h, w = cfg.grid_h, cfg.grid_w
    iu = min(max(int(pos[0]), 0), w - 1)
    iv = min(max(int(pos[1]), 0), h - 1)
    cells, _ = _window_cells(iv * w + iu, h, w, 1)
    lat = frame.latent.reshape(-1, LATENT_DIM)[cells]
    if weight_row is None:
        return lat.mean(axis=0)
    uw = weight_row[cells]
    return (uw @ lat) / (uw.sum() + cfg.pool_eps)


def _box_from_outputs(out: np.ndarray, pos: np.ndarray, frame: Frame,
                      cfg: AdapterConfig) -> tuple[Box3D, float]:
    grid = cfg.grid
    uv = np.array([pos[0] + out[0], pos[1] + out[1]])
    xy = grid.grid_to_world(uv, frame.ego)
    l, wd, ht = (float(math.exp(min(max(v, -6.0), 6.0))) for v in out[2:5])
    yaw = wrap_angle(math.atan2(out[5], out[6]) + frame.ego.heading)
    conf = float(_sigmoid(np.array([out[7]]))[0])
    box = Box3D(center=(float(xy[0]), float(xy[1]), ht / 2), size=(l, wd, ht), yaw=yaw)
    return box, conf


def decode_queries(queries: list[Query], frame: Frame,
                   params: AdapterParams):
    """Decode each query into a Detection (world-frame 3D box + confidence).

    Visual queries carry provenance 'prompt:<id>'; object/box/point queries
    decode with provenance 'base'. Order follows the query list.
    """
    from .detectors import Detection  # local import: detectors depends on scenesim only

    cfg = params.config
    _check_frame(frame, cfg)
    if not queries:
        return []
    rows = np.stack([
        np.concatenate([
            q.embedding,
            _pool_latent(frame, q.position, q.weight_row, cfg),
        ])
        for q in queries
    ])
    outs = params.nets["decoder"].forward(rows)
    dets = []
    for q, out in zip(queries, outs):
        box, conf = _box_from_outputs(out, q.position, frame, cfg)
        prov = f"prompt:{q.prompt_id}" if q.kind == "visual" else "base"
        dets.append(Detection(box=box, confidence=conf, provenance=prov))
    return dets


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-4
    seed: int = 0
    prompt_frame_window: int = 5
    flip_augment: bool = True
    log_every: int = 50


def _flip_frame(frame: Frame) -> Frame:
    """Mirror the grid along v (ego-left axis): appearance rows reverse;
    latent dv and sin-yaw components flip sign."""
    lat = frame.latent[::-1, :, :].copy()
    lat[:, :, 1] *= -1.0
    lat[:, :, 5] *= -1.0
    return Frame(
        index=frame.index,
        ego=frame.ego,
        truths=frame.truths,
        appearance=frame.appearance[::-1, :, :].copy(),
        latent=lat,
        style=frame.style,
    )


def _flip_box2d(box: Box2D, h: int) -> Box2D:
    return Box2D(center=(box.center[0], h - box.center[1]), extent=box.extent)


@dataclass(frozen=True)
class BoxTarget:
    """Grid-frame regression target for the decoder's seven box channels."""

    uv: tuple[float, float]
    log_sizes: tuple[float, float, float]
    sin_yaw: float
    cos_yaw: float


def box_target_for(truth_box: Box3D, ego: Pose, grid: GridSpec) -> BoxTarget:
    cuv = grid.world_to_grid(np.array(truth_box.center[:2]), ego)
    yaw_e = wrap_angle(truth_box.yaw - ego.heading)
    return BoxTarget(
        uv=(float(cuv[0]), float(cuv[1])),
        log_sizes=tuple(math.log(s) for s in truth_box.size),
        sin_yaw=math.sin(yaw_e),
        cos_yaw=math.cos(yaw_e),
    )


def _flip_target(t: BoxTarget, h: int) -> BoxTarget:
    return BoxTarget(uv=(t.uv[0], h - t.uv[1]), log_sizes=t.log_sizes,
                     sin_yaw=-t.sin_yaw, cos_yaw=t.cos_yaw)


def _box7(t: BoxTarget, pos: np.ndarray) -> np.ndarray:
    return np.array([
        t.uv[0] - pos[0], t.uv[1] - pos[1],
        *t.log_sizes, t.sin_yaw, t.cos_yaw,
    ])


def _sample_loss(params: AdapterParams, frame: Frame, prompt_descs: np.ndarray,
                 targets2d: list[Box2D], box_targets: list[BoxTarget],
                 point_samples: list, box_samples: list,
                 frozen: dict | None = None):
    """Forward + loss + full backward for one training sample.

    point_samples: (click_uv, BoxTarget or None) - None marks a background
    (negative) click. box_samples: (Box2D, BoxTarget).
    Returns (metrics dict, tapes dict).

    The decoder consumes candidate positions, pooled latent cells and the
    derived labels as constants (stop-gradient); the finite-difference
    harness passes `frozen` (an initially-empty dict, filled on the first
    call and reused afterwards) so repeated evaluations probe exactly the
    function the analytic gradients differentiate.
    """
    cfg = params.config
    cache = _align_forward(prompt_descs, frame, params)
    losses, ds, dpos = alignment_loss(cache.result, targets2d, cfg)

    # --- decode rows: visual candidates, then point and box prompts
    m, n = cache.kappa.shape
    use_frozen = bool(frozen)
    capture = frozen is not None and not frozen
    if capture:
        frozen.update({"pe": [], "lat": [], "label": [], "target": []})
    rows = []
    conf_labels = []
    row_targets = []
    z_v_route = []
    for mi in range(m):
        for ci in range(n):
            k = mi * n + ci
            if use_frozen:
                pe = frozen["pe"][k]
                lat = frozen["lat"][k]
                label = frozen["label"][k]
                tgt = frozen["target"][k]
            else:
                pos = cache.result.positions[mi, ci]
                pe = fourier_pe(
                    np.array([pos[0] / cfg.grid_w, pos[1] / cfg.grid_h]),
                    cfg.bands, cfg.freq_lo, cfg.freq_hi,
                )
                lat = _pool_latent(frame, pos, cache.u[mi], cfg)
                tb = targets2d[mi]
                inside = (tb.lo[0] <= pos[0] <= tb.hi[0]
                          and tb.lo[1] <= pos[1] <= tb.hi[1])
                label = 1.0 if inside else 0.0
                tgt = _box7(box_targets[mi], pos) if inside else np.zeros(7)
                if capture:
                    frozen["pe"].append(pe)
                    frozen["lat"].append(lat)
                    frozen["label"].append(label)
                    frozen["target"].append(tgt)
            rows.append(np.concatenate([pe + cache.z_v[mi], lat]))
            z_v_route.append(mi)
            conf_labels.append(label)
            row_targets.append(tgt)
    n_visual = len(rows)

    pe_points, point_rows = [], []
    for click, target in point_samples:
        pe = fourier_pe(np.array([click[0] / cfg.grid_w, click[1] / cfg.grid_h]),
                        cfg.bands, cfg.freq_lo, cfg.freq_hi)
        emb = params.nets["point_lift"].forward(pe)
        lat = _pool_latent(frame, np.asarray(click), None, cfg)
        point_rows.append(len(rows))
        rows.append(np.concatenate([emb, lat]))
        pe_points.append(pe)
        conf_labels.append(0.0 if target is None else 1.0)
        row_targets.append(
            np.zeros(7) if target is None else _box7(target, np.asarray(click))
        )

    pe_boxes, box_rows = [], []
    for b2, target in box_samples:
        feats = np.array([
            b2.center[0] / cfg.grid_w, b2.center[1] / cfg.grid_h,
            b2.extent[0] / cfg.grid_w, b2.extent[1] / cfg.grid_h,
        ])
        pe = fourier_pe(feats, cfg.bands, cfg.freq_lo, cfg.freq_hi)
        emb = params.nets["box_lift"].forward(pe)
        lat = _pool_latent(frame, np.asarray(b2.center), None, cfg)
        box_rows.append(len(rows))
        rows.append(np.concatenate([emb, lat]))
        pe_boxes.append(pe)
        conf_labels.append(1.0)
        row_targets.append(_box7(target, np.asarray(b2.center)))

    rows_arr = np.stack(rows) if rows else np.zeros((0, cfg.descriptor_dim + LATENT_DIM))
    conf_arr = np.array(conf_labels)
    btgt_arr = np.stack(row_targets) if row_targets else np.zeros((0, 7))

    tapes: dict[str, GradientTape] = {}
    decode_focal = decode_box = 0.0
    dz_v_extra = np.zeros_like(cache.z_v)
    if len(rows):
        outs = params.nets["decoder"].forward(rows_arr)
        conf = _sigmoid(outs[:, 7])
        decode_focal, dconf = focal_loss(conf, conf_arr)
        dout = np.zeros_like(outs)
        dout[:, 7] = dconf * conf * (1.0 - conf)
        sup = conf_arr == 1.0
        if np.any(sup):
            decode_box, dbox = smooth_l1(outs[sup, :7], btgt_arr[sup])
            dout[sup, :7] = dbox
        tape_dec = params.nets["decoder"].backward(dout * cfg.w_decode)
        tapes["decoder"] = tape_dec
        din = tape_dec.input  # (rows, D + LATENT); latent side is data
        for ri in range(n_visual):
            dz_v_extra[z_v_route[ri]] += din[ri, : cfg.descriptor_dim]
        if point_rows:
            d_emb = din[np.array(point_rows), : cfg.descriptor_dim]
            params.nets["point_lift"].forward(np.stack(pe_points))
            tapes["point_lift"] = params.nets["point_lift"].backward(d_emb)
        if box_rows:
            d_emb = din[np.array(box_rows), : cfg.descriptor_dim]
            params.nets["box_lift"].forward(np.stack(pe_boxes))
            tapes["box_lift"] = params.nets["box_lift"].backward(d_emb)

    tapes.update(_align_backward(cache, ds, dpos, dz_v_extra, params))
    total = losses.total + cfg.w_decode * (decode_focal + decode_box)
    metrics = {
        "loss": total,
        "focal": losses.focal,
        "dice": losses.dice,
        "loc": losses.loc,
        "decode_conf": decode_focal,
        "decode_box": decode_box,
    }
    return metrics, tapes


def _visible_truths(frame: Frame):
    return [t for t in frame.truths if t.visible]


class _FrameCache:
    """Small LRU over rendered frames keyed by (scenario index, frame)."""

    def __init__(self, scenarios: list[Scenario], maxsize: int = 64):
        self.scenarios = scenarios
        self.maxsize = maxsize
        self._store: dict[tuple[int, int], Frame] = {}

    def get(self, si: int, t: int) -> Frame:
        key = (si, t)
        hit = self._store.pop(key, None)
        if hit is None:
            hit = render_frame(self.scenarios[si], t)
            if len(self._store) >= self.maxsize:
                self._store.pop(next(iter(self._store)))
        self._store[key] = hit
        return hit


def _draw_sample(cache: _FrameCache, params: AdapterParams,
                 tcfg: TrainConfig, step: int, slot: int):
    """Pick (frame, prompt descriptor, 2D target, box target, aux samples)."""
    cfg = params.config
    rng = rng_for(tcfg.seed, "sample", step, slot)
    scenarios = cache.scenarios
    for _attempt in range(20):
        si = int(rng.integers(len(scenarios)))
        sc = scenarios[si]
        t = int(rng.integers(sc.config.n_frames))
        frame = cache.get(si, t)
        vis = _visible_truths(frame)
        if not vis:
            continue
        truth = vis[int(rng.integers(len(vis)))]
        off = int(rng.integers(-tcfg.prompt_frame_window, tcfg.prompt_frame_window + 1))
        tp = min(max(t + off, 0), sc.config.n_frames - 1)
        pframe = frame if tp == t else cache.get(si, tp)
        ptruth = next((x for x in _visible_truths(pframe)
                       if x.entity_id == truth.entity_id), None)
        if ptruth is None:
            pframe, ptruth = frame, truth
        pbox = project_to_grid(ptruth.box, pframe.ego, sc.config.grid)
        tbox = project_to_grid(truth.box, frame.ego, sc.config.grid)
        if pbox is None or tbox is None:
            continue
        desc = crop_descriptor(pframe, pbox)
        target = box_target_for(truth.box, frame.ego, sc.config.grid)
        others = [project_to_grid(x.box, frame.ego, sc.config.grid)
                  for x in frame.truths]
        others = [b for b in others if b is not None]

        flip = tcfg.flip_augment and rng.uniform() < 0.5
        if flip:
            frame = _flip_frame(frame)
            tbox = _flip_box2d(tbox, cfg.grid_h)
            target = _flip_target(target, cfg.grid_h)
            others = [_flip_box2d(b, cfg.grid_h) for b in others]

        # point prompt: perturbed click on the target + one background click
        half_diag = 0.5 * math.hypot(*tbox.extent)
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(0, 0.15) * half_diag
        click = (
            min(max(tbox.center[0] + rad * math.cos(ang), 0.0), cfg.grid_w - 1e-6),
            min(max(tbox.center[1] + rad * math.sin(ang), 0.0), cfg.grid_h - 1e-6),
        )
        neg = None
        for _ in range(30):
            cand = (rng.uniform(0, cfg.grid_w), rng.uniform(0, cfg.grid_h))
            clear = all(
                not (b.lo[0] - 2 <= cand[0] <= b.hi[0] + 2
                     and b.lo[1] - 2 <= cand[1] <= b.hi[1] + 2)
                for b in others
            )
            if clear:
                neg = cand
                break
        point_samples = [(click, target)]
        if neg is not None:
            point_samples.append((neg, None))
        box_samples = [(tbox, target)]
        return frame, desc, tbox, target, point_samples, box_samples
    raise RuntimeError("could not draw a training sample with visible truths")


def train_adapter(scenarios: list[Scenario], config: AdapterConfig,
                  tcfg: TrainConfig):
    """Train all adapter networks on prompt/target pairs from scenarios.

    Deterministic given (scenarios, config, tcfg). Returns (params, curve)
    where curve is a list of per-logging-step loss dicts; zero steps returns
    the untouched initialization.
    """
    params = init_adapter(config, tcfg.seed)
    states = {name: nnkit.init_optimizer(net, tcfg.lr)
              for name, net in params.nets.items()}
    cache = _FrameCache(scenarios)
    curve: list[dict] = []
    for step in range(tcfg.steps):
        acc = {name: nnkit.zero_tape(net) for name, net in params.nets.items()}
        agg: dict[str, float] = {}
        for slot in range(tcfg.batch_size):
            frame, desc, tbox, target, pts, boxes = _draw_sample(
                cache, params, tcfg, step, slot
            )
            metrics, tapes = _sample_loss(
                params, frame, desc[None, :], [tbox], [target], pts, boxes
            )
            for k, v in metrics.items():
                agg[k] = agg.get(k, 0.0) + v / tcfg.batch_size
            for name, tape in tapes.items():
                acc[name].add_(tape, scale=1.0 / tcfg.batch_size)
        pos = step / max(tcfg.steps, 1)
        for name, net in params.nets.items():
            nnkit.optimizer_step(net, acc[name], states[name], pos)
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            curve.append({"step": step, **agg})
    return params, curve


def eval_alignment(params: AdapterParams, scenarios: list[Scenario],
                   n_samples: int, seed: int = 0,
                   prompt_frame_window: int = 5) -> dict:
    """Hit rates of candidate positions on held-out prompt/target pairs.

    A sample is a top-N hit when any candidate lands inside the target's
    grid footprint box, and a top-1 hit when the first (strongest-peak)
    candidate does. Returns {'top1': ..., 'topn': ..., 'n': ...}.
    """
    cache = _FrameCache(scenarios)
    tcfg = TrainConfig(seed=seed, flip_augment=False,
                       prompt_frame_window=prompt_frame_window)
    top1 = topn = 0
    for i in range(n_samples):
        frame, desc, tbox, _target, _pts, _boxes = _draw_sample(
            cache, params, tcfg, step=i, slot=0
        )
        res = _align_forward(desc[None, :], frame, params).result
        inside = [
            bool(tbox.lo[0] <= p[0] <= tbox.hi[0]
                 and tbox.lo[1] <= p[1] <= tbox.hi[1])
            for p in res.positions[0]
        ]
        top1 += inside[0]
        topn += any(inside)
    return {"top1": top1 / n_samples, "topn": topn / n_samples, "n": n_samples}


# --------------------------------------------------------------- checkpoint


def checkpoint_manifest(config: AdapterConfig) -> dict:
    return {"kind": "adapter-checkpoint", "config": asdict(config)}


def save_checkpoint(params: AdapterParams, path: str) -> None:
    """Write the adapter checkpoint plus a sidecar manifest file."""
    nnkit.save_params(
        path,
        params.nets,
        arrays={
            "object_queries": params.object_queries,
            "object_anchors": params.object_anchors,
        },
        meta=checkpoint_manifest(params.config),
    )
    import json

    with open(path + ".manifest.json", "w") as f:
        json.dump(checkpoint_manifest(params.config), f, indent=2)


def load_checkpoint(path: str) -> AdapterParams:
    """Load a checkpoint; the sidecar manifest (if present) must agree."""
    nets, arrays, meta = nnkit.load_params(path)
    if meta.get("kind") != "adapter-checkpoint":
        raise ValueError("not an adapter checkpoint")
    config = AdapterConfig(**meta["config"])
    manifest_path = path + ".manifest.json"
    if os.path.exists(manifest_path):
        import json

        with open(manifest_path) as f:
            manifest = json.load(f)
        if manifest != checkpoint_manifest(config):
            raise ValueError("sidecar manifest does not match checkpoint")
    missing = set(NET_NAMES) - set(nets)
    if missing:
        raise ValueError(f"checkpoint missing networks: {sorted(missing)}")
    return AdapterParams(
        config=config,
        nets=nets,
        object_queries=arrays["object_queries"],
        object_anchors=arrays["object_anchors"],
    )
