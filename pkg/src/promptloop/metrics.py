"""Class-agnostic detection metrics and the episode-level aggregate score.

Matching follows the center-distance greedy protocol: detections in
descending confidence order each take the nearest unmatched truth within
the threshold. AP integrates the 101-point interpolated PR curve above a
(0.1, 0.1) operating floor; the aggregate combines mAP, recall and the
three true-positive error terms into one [0, 1] score.

Subset reports (distant-only, per-tag, style-shifted) reuse one matching
pass: a detection matched to an out-of-subset truth is ignored rather than
counted as a false positive, so subset scores are not polluted by correct
detections of other objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detectors import Detection
from .geometry import wrap_angle
from .scenesim import Scenario, TruthBox, render_frame

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)  # meters, center distance
TP_THRESHOLD = 2.0  # operating point for recall and TP errors
MIN_RECALL = 0.1
MIN_PRECISION = 0.1


@dataclass(frozen=True)
class MatchPair:
    det: Detection
    truth: TruthBox
    distance: float


@dataclass
class MatchSet:
    thresholds: tuple[float, ...]
    pairs: dict[float, list[MatchPair]]
    unmatched_dets: dict[float, list[Detection]]
    unmatched_truths: dict[float, list[TruthBox]]


def _ground_distance(det: Detection, truth: TruthBox) -> float:
    dx = det.box.center[0] - truth.box.center[0]
    dy = det.box.center[1] - truth.box.center[1]
    return math.hypot(dx, dy)


def match(truths: list[TruthBox], dets: list[Detection],
          thresholds: tuple[float, ...] = THRESHOLDS) -> MatchSet:
    """Greedy confidence-ordered matching at each threshold.

    Each detection takes the nearest unmatched truth within range;
    distance ties break toward the lower truth index.
    """
    for d in dets:
        if not 0.0 <= d.confidence <= 1.0:
            raise ValueError(f"confidence {d.confidence} outside [0, 1]")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    pairs: dict[float, list[MatchPair]] = {}
    un_dets: dict[float, list[Detection]] = {}
    un_truths: dict[float, list[TruthBox]] = {}
    for thr in thresholds:
        used: set[int] = set()
        matched: list[MatchPair] = []
        leftover: list[Detection] = []
        for i in order:
            best = None
            for j, t in enumerate(truths):
                if j in used:
                    continue
                dist = _ground_distance(dets[i], t)
                if dist <= thr and (best is None or (dist, j) < best[:2]):
                    best = (dist, j, t)
            if best is None:
                leftover.append(dets[i])
            else:
                used.add(best[1])
                matched.append(MatchPair(dets[i], best[2], best[0]))
        pairs[thr] = matched
        un_dets[thr] = leftover
        un_truths[thr] = [t for j, t in enumerate(truths) if j not in used]
    return MatchSet(tuple(thresholds), pairs, un_dets, un_truths)


# ------------------------------------------------------------------ AP


def _ap_from_rows(rows: list[tuple[float, str]], n_truths: int) -> float:
    """101-point interpolated AP with the (0.1, 0.1) floor.

    rows: (confidence, status) with status tp | fp | ignore; ignored rows
    drop out of the ranking entirely.
    """
    if n_truths == 0:
        return 0.0
    ranked = sorted((r for r in rows if r[1] != "ignore"),
                    key=lambda r: -r[0])
    if not ranked:
        return 0.0
    tp = np.cumsum([r[1] == "tp" for r in ranked])
    fp = np.cumsum([r[1] == "fp" for r in ranked])
    rec = tp / n_truths
    prec = tp / np.maximum(tp + fp, 1)
    rec_interp = np.linspace(0.0, 1.0, 101)
    prec_i = np.interp(rec_interp, rec, prec, right=0.0)
    tail = prec_i[rec_interp > MIN_RECALL] - MIN_PRECISION
    ap = np.mean(np.clip(tail, 0.0, None)) / (1.0 - MIN_PRECISION)
    return float(min(1.0, ap))  # guard summation roundoff at the top end


def average_precision(matchsets: list[MatchSet], threshold: float) -> float:
    """AP at one threshold over a collection of per-frame match sets."""
    rows: list[tuple[float, str]] = []
    n_truths = 0
    for ms in matchsets:
        rows += [(p.det.confidence, "tp") for p in ms.pairs[threshold]]
        rows += [(d.confidence, "fp") for d in ms.unmatched_dets[threshold]]
        n_truths += len(ms.pairs[threshold]) + len(ms.unmatched_truths[threshold])
    return _ap_from_rows(rows, n_truths)


# ------------------------------------------------------------ TP errors


def _size_iou(a: Detection, b: TruthBox) -> float:
    """Volume IoU after aligning centers and yaw (size-only agreement)."""
    sa, sb = a.box.size, b.box.size
    inter = math.prod(min(x, y) for x, y in zip(sa, sb))
    union = math.prod(sa) + math.prod(sb) - inter
    return inter / union


def tp_errors(pairs: list[MatchPair]) -> tuple[float, float, float]:
    """(mATE meters, mASE ratio, mAOE radians) over matched pairs.

    No matches means worst case: every term saturates its clamp.
    """
    if not pairs:
        return 1.0, 1.0, 1.0
    ate = float(np.mean([p.distance for p in pairs]))
    ase = float(np.mean([1.0 - _size_iou(p.det, p.truth) for p in pairs]))
    aoe = float(np.mean([abs(wrap_angle(p.det.box.yaw - p.truth.box.yaw))
                         for p in pairs]))
    return ate, ase, aoe


def eds(mAP: float, recall: float, mATE: float, mASE: float,
        mAOE: float) -> float:
    """Aggregate score: (1/6)[3·mAP + recall · Σ(1 − min(1, err))]."""
    if not 0.0 <= mAP <= 1.0:
        raise ValueError(f"mAP {mAP} outside [0, 1]")
    if not 0.0 <= recall <= 1.0:
        raise ValueError(f"recall {recall} outside [0, 1]")
    if min(mATE, mASE, mAOE) < 0.0:
        raise ValueError("error terms must be nonnegative")
    tp_sum = sum(1.0 - min(1.0, e) for e in (mATE, mASE, mAOE))
    return (3.0 * mAP + recall * tp_sum) / 6.0


# ------------------------------------------------------------- reports


@dataclass(frozen=True)
class EDSReport:
    mAP: float
    recall: float
    mATE: float
    mASE: float
    mAOE: float
    eds: float
    ap_by_threshold: dict[float, float]
    n_truths: int
    n_dets: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP, "recall": self.recall,
            "mATE": self.mATE, "mASE": self.mASE, "mAOE": self.mAOE,
            "eds": self.eds,
            "ap_by_threshold": {str(k): v for k, v in self.ap_by_threshold.items()},
            "n_truths": self.n_truths, "n_dets": self.n_dets,
        }


@dataclass(frozen=True)
class _FrameRecord:
    truths: list[TruthBox]
    dets: list[Detection]
    matchset: MatchSet
    style_shifted: bool


def _subset_report(records: list[_FrameRecord], member,
                   thresholds: tuple[float, ...],
                   tp_threshold: float) -> EDSReport:
    """member(truth, record) -> bool decides subset membership."""
    n_truths = sum(1 for r in records for t in r.truths if member(t, r))
    n_dets = sum(len(r.dets) for r in records)
    ap_by: dict[float, float] = {}
    for thr in thresholds:
        rows: list[tuple[float, str]] = []
        for r in records:
            for p in r.matchset.pairs[thr]:
                rows.append((p.det.confidence,
                             "tp" if member(p.truth, r) else "ignore"))
            for d in r.matchset.unmatched_dets[thr]:
                rows.append((d.confidence, "fp"))
        ap_by[thr] = _ap_from_rows(rows, n_truths)
    map_ = float(np.mean(list(ap_by.values()))) if ap_by else 0.0
    tp_pairs = [p for r in records for p in r.matchset.pairs[tp_threshold]
                if member(p.truth, r)]
    recall = len(tp_pairs) / n_truths if n_truths else 0.0
    mate, mase, maoe = tp_errors(tp_pairs)
    return EDSReport(
        mAP=map_, recall=recall, mATE=mate, mASE=mase, mAOE=maoe,
        eds=eds(map_, recall, mate, mase, maoe),
        ap_by_threshold=ap_by, n_truths=n_truths, n_dets=n_dets,
    )


def _rendered_truths(scenario: Scenario, index: int) -> list[TruthBox]:
    return render_frame(scenario, index).truths


def evaluate(runs, *, thresholds: tuple[float, ...] = THRESHOLDS,
             tp_threshold: float = TP_THRESHOLD, distant_range: float = 30.0,
             tag_subsets: dict[str, tuple[str, ...]] | None = None,
             truths_provider=None) -> dict[str, EDSReport]:
    """Score (EpisodeLog, Scenario) runs overall and per attribute subset.

    Always emits "overall"; adds "distant" (range >= distant_range),
    one report per tag group (auto-split by class tag when tag_subsets is
    None), and "style_shift" for frames past a scenario's style shift.
    Empty subsets are omitted. truths_provider(scenario, index) can replace
    the default full-frame render when truths are already cached.
    """
    truths_provider = truths_provider or _rendered_truths
    records: list[_FrameRecord] = []
    for log, scenario in runs:
        shift = scenario.config.style_shift
        for fl in log.frames:
            truths = [t for t in truths_provider(scenario, fl.index)
                      if t.visible]
            records.append(_FrameRecord(
                truths=truths, dets=fl.merged,
                matchset=match(truths, fl.merged, thresholds),
                style_shifted=shift is not None and fl.index >= shift[0],
            ))

    if tag_subsets is None:
        seen_tags = sorted({t.class_tag for r in records for t in r.truths})
        tag_subsets = {f"tag:{tag}": (tag,) for tag in seen_tags}

    members = {"overall": lambda t, r: True,
               "distant": lambda t, r: t.range_m >= distant_range}
    for name, tags in tag_subsets.items():
        members[name] = lambda t, r, tags=tuple(tags): t.class_tag in tags
    members["style_shift"] = lambda t, r: r.style_shifted

    reports: dict[str, EDSReport] = {}
    for name, member in members.items():
        rep = _subset_report(records, member, tuple(thresholds), tp_threshold)
        if name == "overall" or rep.n_truths > 0:
            reports[name] = rep
    return reports


# ------------------------------------------------------- ablation curves


def post_feedback_recall(runs, member=None, miss_distance: float = 2.0,
                         scored=None, truths_provider=None) -> float:
    """Per-frame recall over frames after each entity's first feedback.

    An (entity, frame) pair is eligible when the entity drew its first
    feedback click on an earlier frame of that episode and is visible on
    this one; `member(truth)` narrows which truths count. Returns the
    fraction of eligible pairs covered by a merged detection within
    miss_distance. `scored` supplies the frame streams to score (paired
    1:1 with `runs`; defaults to the feedback runs themselves) — pass the
    no-feedback arm's runs to rate the identical pair set without help.
    """
    truths_provider = truths_provider or _rendered_truths
    member = member or (lambda t: True)
    scored = runs if scored is None else scored
    if len(scored) != len(runs):
        raise ValueError("scored runs must pair 1:1 with feedback runs")
    hit = total = 0
    for (log, scenario), (slog, _) in zip(runs, scored):
        if slog.n_frames != log.n_frames:
            raise ValueError("paired runs disagree on frame count")
        first: dict[str, int] = {}
        for fl in log.frames:
            for ev in fl.events:
                if ev.entity_id is not None and ev.entity_id not in first:
                    first[ev.entity_id] = fl.index
        for fl, sfl in zip(log.frames, slog.frames):
            for t in truths_provider(scenario, fl.index):
                if not (t.visible and member(t)):
                    continue
                if first.get(t.entity_id, fl.index) >= fl.index:
                    continue  # no feedback yet for this entity
                total += 1
                if any(_ground_distance(d, t) <= miss_distance
                       for d in sfl.merged):
                    hit += 1
    if total == 0:
        raise ValueError("no (entity, frame) pairs follow a feedback event")
    return hit / total


def recall_vs_offset(runs, miss_distance: float = 2.0,
                     truths_provider=None) -> dict[int, float]:
    """Recall of preloaded-prompt targets by frame offset from the preload.

    Expects the first-frame-prompt protocol: feedback disabled and one
    preloaded prompt per target entity, with prompt id == entity id.
    Offset 0 is excluded (prompts only act from frame 1). A target counts
    as recalled when any merged detection lies within miss_distance of it.
    """
    truths_provider = truths_provider or _rendered_truths
    hit: dict[int, int] = {}
    total: dict[int, int] = {}
    for log, scenario in runs:
        targets = list(log.buffer.get("preloaded", []))
        if not targets or log.feedback is not None:
            raise ValueError(
                "recall_vs_offset needs preloaded prompts and no feedback"
            )
        for fl in log.frames[1:]:
            by_id = {t.entity_id: t
                     for t in truths_provider(scenario, fl.index) if t.visible}
            for eid in targets:
                truth = by_id.get(eid)
                if truth is None:
                    continue
                total[fl.index] = total.get(fl.index, 0) + 1
                if any(_ground_distance(d, truth) <= miss_distance
                       for d in fl.merged):
                    hit[fl.index] = hit.get(fl.index, 0) + 1
    return {off: hit.get(off, 0) / n for off, n in sorted(total.items())}
