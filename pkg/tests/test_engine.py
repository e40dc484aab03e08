import numpy as np
import pytest

from promptloop.adapter import AdapterConfig, VisualPrompt, init_adapter
from promptloop.detectors import ClassMiss, Detection, DistantMiss, NoMiss, detect
from promptloop.engine import (
    EngineConfig,
    EpisodeLog,
    FrameLog,
    merge_detections,
    run_episode,
    run_step,
    track_assignments,
)
from promptloop.feedback import FeedbackConfig
from promptloop.geometry import Box3D, GridSpec, bev_iou, nms
from promptloop.promptbuffer import BufferConfig, PromptBuffer
from promptloop.scenesim import ScenarioConfig, SpawnSpec, generate_scenario, render_frame

TINY_GRID = GridSpec(h=16, w=16, extent=25.0)


def tiny_scenario(seed=7, n_frames=12):
    script = (
        SpawnSpec("a", "car", 0, n_frames, (4.0, 3.0), (0.5, 0.0)),
        SpawnSpec("b", "truck", 0, n_frames, (-5.0, -4.0), (0.0, 0.4)),
        SpawnSpec("c", "van", 0, n_frames, (1.0, -7.5), (0.3, 0.2)),
    )
    cfg = ScenarioConfig(
        seed=seed, n_frames=n_frames, n_entities=3, grid=TINY_GRID,
        ego_speed=0.0, spawn_script=script,
    )
    return generate_scenario(cfg)


def tiny_params(seed=1, conf_bias=None):
    params = init_adapter(
        AdapterConfig(grid_h=16, grid_w=16, grid_extent=25.0), seed=seed
    )
    if conf_bias is not None:
        params.nets["decoder"].layers[-1].biases[7] = conf_bias
        params.nets["decoder"].layers[-1].weights[7, :] = 0.0
    return params


def det(x, y, conf, provenance="base", yaw=0.0):
    box = Box3D(center=(x, y, 0.0), size=(4.0, 2.0, 1.5), yaw=yaw)
    return Detection(box=box, confidence=conf, provenance=provenance)


# ------------------------------------------------------------------ merging


def test_merge_drops_low_confidence():
    cfg = EngineConfig()
    base = [det(0, 0, 0.8), det(10, 0, 0.29)]
    prompt = [det(-10, 0, 0.31, "prompt:p1"), det(-10, 8, 0.05, "prompt:p2")]
    merged = merge_detections(base, prompt, cfg)
    confs = sorted(d.confidence for d in merged)
    assert confs == [0.31, 0.8]


def test_merge_coincident_keeps_single_highest():
    # same object found by both paths: one survivor, chosen by confidence
    cfg = EngineConfig()
    base = [det(0.0, 0.0, 0.6)]
    prompt = [det(0.3, 0.1, 0.9, "prompt:p1")]
    assert bev_iou(base[0].box, prompt[0].box) > cfg.nms_iou
    merged = merge_detections(base, prompt, cfg)
    assert len(merged) == 1
    assert merged[0].provenance == "prompt:p1"

    # provenance gives no priority: a stronger base detection wins too
    merged = merge_detections([det(0.0, 0.0, 0.95)], prompt, cfg)
    assert len(merged) == 1
    assert merged[0].provenance == "base"


def test_merge_disjoint_keeps_all():
    cfg = EngineConfig()
    base = [det(0, 0, 0.6), det(8, 8, 0.7)]
    prompt = [det(-8, -8, 0.5, "prompt:p1")]
    merged = merge_detections(base, prompt, cfg)
    assert len(merged) == 3
    assert {d.provenance for d in merged} == {"base", "prompt:p1"}


# -------------------------------------------------------------- degeneration


def test_degeneration_matches_plain_detector():
    # empty buffer + feedback off collapses to threshold + NMS of the base
    sc = tiny_scenario()
    params = tiny_params()
    policy = DistantMiss(range_m=6.0, miss_rate=1.0)
    ecfg = EngineConfig()
    log = run_episode(sc, policy, params, seed=11, feedback_config=None,
                      engine_config=ecfg)
    for t in range(sc.config.n_frames):
        frame = render_frame(sc, t)
        base = detect(frame, policy, 11, ecfg.detector_noise)
        expected = nms([d for d in base if d.confidence >= ecfg.conf_floor],
                       ecfg.nms_iou)
        assert log.frames[t].merged == expected
        assert log.frames[t].buffer_size == 0
        assert log.frames[t].prompt_confidences == {}
        assert log.frames[t].events == []


# ----------------------------------------------------------------- causality


def test_prompt_takes_effect_next_frame():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=20.0)
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    log = run_episode(sc, policy, params, seed=3,
                      feedback_config=FeedbackConfig(interval=0))
    f0, f1 = log.frames[0], log.frames[1]
    # the van is clicked on frame 0, but frame 0 ran with an empty buffer
    assert [e.entity_id for e in f0.events] == ["c"]
    assert f0.prompt_confidences == {}
    assert not any(d.from_prompt for d in f0.merged)
    # from frame 1 on the prompt participates
    pid = f0.events[0].prompt_id
    assert pid in f1.prompt_confidences
    assert any(d.from_prompt for d in f1.merged)


def test_prompted_entity_not_reclicked_while_buffered():
    sc = tiny_scenario()
    # never-confident decode: the van stays missed, but its prompt stays live
    params = tiny_params(conf_bias=-20.0)
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    log = run_episode(sc, policy, params, seed=3,
                      feedback_config=FeedbackConfig(interval=0),
                      buffer_config=BufferConfig(window=50))
    assert [e.entity_id for e in log.frames[0].events] == ["c"]
    for fl in log.frames[1:]:
        assert fl.events == []
        assert fl.buffer_size == 1


def test_eviction_reopens_feedback():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=-20.0)  # prompts never detect anything
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    # one zero-confidence record is enough to evict
    log = run_episode(sc, policy, params, seed=3,
                      feedback_config=FeedbackConfig(interval=0),
                      buffer_config=BufferConfig(window=1, conf_floor=0.5))
    # frame t: sweep evicts frame t-1's prompt, feedback re-clicks the van
    pids = []
    for fl in log.frames:
        assert len(fl.events) == 1
        pids.append(fl.events[0].prompt_id)
    for t, fl in enumerate(log.frames[1:], start=1):
        assert fl.evicted == [pids[t - 1]]
    assert len(set(pids)) == len(pids)  # ids are frame-stamped, all distinct


# --------------------------------------------------------------- determinism


def test_replay_is_bit_exact():
    sc = tiny_scenario()
    params = tiny_params()
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    kw = dict(feedback_config=FeedbackConfig(interval=1, perturb_ratio=0.2))
    a = run_episode(sc, policy, params, seed=5, **kw)
    b = run_episode(sc, policy, params, seed=5, **kw)
    assert a.to_dict() == b.to_dict()


def test_log_roundtrip(tmp_path):
    sc = tiny_scenario()
    params = tiny_params(conf_bias=20.0)
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    log = run_episode(sc, policy, params, seed=5,
                      feedback_config=FeedbackConfig(interval=0, perturb_ratio=0.1))
    path = tmp_path / "episode.json"
    log.save(str(path))
    back = EpisodeLog.load(str(path))
    assert back.to_dict() == log.to_dict()
    assert back.frames[1].merged == log.frames[1].merged

    doc = log.to_dict()
    doc["schema_version"] = 99
    with pytest.raises(ValueError, match="schema_version"):
        EpisodeLog.from_dict(doc)


# ---------------------------------------------------------------- interference


def test_interference_only_through_nms():
    # any base detection displaced by the feedback arm must lose to a
    # strictly more confident overlapping prompt detection
    sc = tiny_scenario()
    params = tiny_params(conf_bias=20.0)  # make suppression actually happen
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    ecfg = EngineConfig()
    ctl = run_episode(sc, policy, params, seed=5, engine_config=ecfg)
    fb = run_episode(sc, policy, params, seed=5, engine_config=ecfg,
                     feedback_config=FeedbackConfig(interval=0))
    assert any(d.from_prompt for fl in fb.frames for d in fl.merged)
    for t in range(sc.config.n_frames):
        kept = fb.frames[t].merged
        for d in ctl.frames[t].merged:
            if d in kept:
                continue
            blockers = [
                p for p in kept
                if p.from_prompt and p.confidence > d.confidence
                and bev_iou(p.box, d.box) > ecfg.nms_iou
            ]
            assert blockers, f"frame {t}: base detection vanished without cause"


# -------------------------------------------------------------------- tracks


def test_track_assignments_groups_by_prompt():
    frames = [
        FrameLog(0, [det(0, 0, 0.8)], [], 0, {}, []),
        FrameLog(1, [det(0, 0, 0.8), det(5, 5, 0.7, "prompt:pA")], [], 1,
                 {"pA": 0.7}, []),
        FrameLog(2, [det(5, 6, 0.75, "prompt:pA"),
                     det(-5, 0, 0.4, "prompt:pB")], [], 2,
                 {"pA": 0.75, "pB": 0.4}, []),
        FrameLog(3, [det(-5, 0, 0.5, "prompt:pB")], [], 1, {"pB": 0.5}, ["pA"]),
    ]
    log = EpisodeLog(seed=0, scenario_seed=0, n_frames=4, policy={},
                     engine={}, feedback=None, buffer={}, frames=frames)
    tracks = track_assignments(log)
    assert set(tracks) == {"pA", "pB"}
    assert [t for t, _ in tracks["pA"]] == [1, 2]
    assert [t for t, _ in tracks["pB"]] == [2, 3]
    assert all(d.provenance == "prompt:pA" for _, d in tracks["pA"])


def test_tracks_from_live_episode_match_log():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=20.0)
    policy = ClassMiss(tags=("van",), miss_rate=1.0)
    log = run_episode(sc, policy, params, seed=5,
                      feedback_config=FeedbackConfig(interval=0))
    tracks = track_assignments(log)
    n_in_log = sum(1 for fl in log.frames for d in fl.merged if d.from_prompt)
    assert sum(len(v) for v in tracks.values()) == n_in_log
    for pid, seq in tracks.items():
        frames_seen = [t for t, _ in seq]
        assert frames_seen == sorted(frames_seen)


# ------------------------------------------------------------- frozen buffer


def test_frozen_buffer_never_changes():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=20.0)
    frame0 = render_frame(sc, 0)
    rng = np.random.default_rng(0)
    pre = []
    for i in range(3):
        d = rng.normal(size=32)
        pre.append(VisualPrompt(prompt_id=f"web{i}", descriptor=d / np.linalg.norm(d)))
    log = run_episode(sc, NoMiss(), params, seed=2,
                      feedback_config=FeedbackConfig(interval=0),
                      preload_prompts=pre, freeze_buffer=True)
    for fl in log.frames:
        assert fl.buffer_size == 3
        assert set(fl.prompt_confidences) == {"web0", "web1", "web2"}
        assert fl.events == []
        assert fl.evicted == []
    assert log.buffer["frozen"] is True
    assert log.buffer["preloaded"] == ["web0", "web1", "web2"]
    # preloaded prompts act from frame 0 (they were enqueued before it)
    assert any(d.from_prompt for d in log.frames[0].merged)


def test_preloaded_unfrozen_buffer_records_and_sweeps():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=-20.0)  # never detected -> swept out
    rng = np.random.default_rng(1)
    d = rng.normal(size=32)
    pre = [VisualPrompt(prompt_id="web0", descriptor=d / np.linalg.norm(d))]
    log = run_episode(sc, NoMiss(), params, seed=2,
                      buffer_config=BufferConfig(window=2, conf_floor=0.5),
                      preload_prompts=pre)
    assert log.frames[0].buffer_size == 1
    assert log.frames[1].evicted == ["web0"]
    assert log.frames[1].buffer_size == 0


# ----------------------------------------------------------------- plumbing


def test_run_step_scores_only_surviving_prompts():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=-20.0)
    frame = render_frame(sc, 0)
    buffer = PromptBuffer(BufferConfig(window=10))
    rng = np.random.default_rng(3)
    d = rng.normal(size=32)
    buffer.enqueue(VisualPrompt(prompt_id="q0", descriptor=d / np.linalg.norm(d)), 0)
    merged, confs, evicted = run_step(frame, NoMiss(), params, buffer,
                                      EngineConfig(), seed=4)
    assert confs == {"q0": 0.0}
    assert evicted == []
    assert buffer.get("q0").confidence_history[-1] == 0.0
    assert not any(d.from_prompt for d in merged)


def test_run_step_without_mutation_leaves_buffer_alone():
    sc = tiny_scenario()
    params = tiny_params()
    frame = render_frame(sc, 0)
    buffer = PromptBuffer(BufferConfig())
    rng = np.random.default_rng(3)
    d = rng.normal(size=32)
    buffer.enqueue(VisualPrompt(prompt_id="q0", descriptor=d / np.linalg.norm(d)), 0)
    run_step(frame, NoMiss(), params, buffer, EngineConfig(), seed=4,
             mutate_buffer=False)
    assert list(buffer.get("q0").confidence_history) == []


def test_grid_mismatch_rejected():
    sc = tiny_scenario()
    params = init_adapter(AdapterConfig(grid_h=32, grid_w=32, grid_extent=25.0))
    with pytest.raises(ValueError, match="grid"):
        run_episode(sc, NoMiss(), params, seed=0)


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(conf_floor=1.5)
    with pytest.raises(ValueError):
        EngineConfig(nms_iou=-0.1)


def test_buffer_trace_covers_every_frame():
    sc = tiny_scenario()
    params = tiny_params(conf_bias=-20.0)
    log = run_episode(sc, ClassMiss(tags=("van",), miss_rate=1.0), params,
                      seed=8, feedback_config=FeedbackConfig(interval=2))
    trace = log.buffer_trace()
    assert len(trace) == sc.config.n_frames
    assert trace[0] == 1  # frame 0 is always a collection frame
