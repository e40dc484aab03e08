import math

import numpy as np
import pytest

from promptloop.detectors import (
    ClassMiss,
    Detection,
    DistantMiss,
    DomainShift,
    NoMiss,
    NoiseParams,
    UnseenClass,
    detect,
    policy_from_dict,
    policy_to_dict,
)
from promptloop.geometry import Box3D, Pose
from promptloop.scenesim import Frame, StyleParams, TruthBox


def make_frame(index, truths, epsilon=0.2):
    dummy = np.zeros((1, 1, 1))
    return Frame(
        index=index,
        ego=Pose(0.0, 0.0, 0.0),
        truths=truths,
        appearance=dummy,
        latent=dummy,
        style=StyleParams(rotation_seed=0, epsilon=epsilon),
    )


def truth(eid="a", x=50.0, tag="car", visible=True):
    box = Box3D(center=(x, 0.0, 0.8), size=(4.5, 2.0, 1.6), yaw=0.1)
    return TruthBox(eid, box, visible, tag, math.hypot(x, 0.0))


def test_no_miss_detects_all_visible():
    f = make_frame(0, [truth("a", 10), truth("b", 20, "truck"), truth("c", 15, visible=False)])
    dets = detect(f, NoMiss(), seed=1)
    assert len(dets) == 2
    assert all(d.provenance == "base" for d in dets)
    assert {d.class_tag for d in dets} == {"car", "truck"}


def test_detect_deterministic():
    f = make_frame(3, [truth("a", 12), truth("b", 40)])
    d1 = detect(f, DistantMiss(30.0, 0.8), seed=9)
    d2 = detect(f, DistantMiss(30.0, 0.8), seed=9)
    assert d1 == d2
    d3 = detect(f, DistantMiss(30.0, 0.8), seed=10)
    assert d1 != d3


def test_unseen_class_structurally_blind():
    for seed in range(20):
        f = make_frame(seed, [truth("a", 10, "car"), truth("b", 12, "truck")])
        dets = detect(f, UnseenClass(("truck",)), seed=seed)
        assert all(d.class_tag != "truck" for d in dets)
        assert any(d.class_tag == "car" for d in dets)


def test_distant_miss_long_run_frequency():
    policy = DistantMiss(range_m=30.0, miss_rate=0.8)
    hits = 0
    n = 10_000
    for i in range(n):
        f = make_frame(i, [truth("a", 50.0)])
        hits += len(detect(f, policy, seed=123))
    assert abs(hits / n - 0.2) < 0.02


def test_near_objects_unaffected_by_distant_miss():
    policy = DistantMiss(range_m=30.0, miss_rate=0.8)
    for i in range(50):
        f = make_frame(i, [truth("a", 10.0)])
        assert len(detect(f, policy, seed=7)) == 1


def test_miss_persists_within_block():
    policy = DistantMiss(range_m=30.0, miss_rate=0.5)
    states = []
    for i in range(200):
        f = make_frame(i, [truth("a", 50.0)])
        states.append(len(detect(f, policy, seed=77)))
    for block in range(40):
        chunk = states[block * 5 : (block + 1) * 5]
        assert len(set(chunk)) == 1  # constant within the block
    assert len(set(states)) == 2  # both states occur across blocks


def test_class_miss_only_matching_tags():
    policy = ClassMiss(tags=("car",), miss_rate=1.0)
    f = make_frame(0, [truth("a", 10, "car"), truth("b", 10.5, "van")])
    dets = detect(f, policy, seed=3)
    assert [d.class_tag for d in dets] == ["van"]


def test_domain_shift_gates_on_style():
    policy = DomainShift(epsilon_threshold=0.25, miss_rate=1.0)
    calm = make_frame(0, [truth("a", 10)], epsilon=0.2)
    shifted = make_frame(0, [truth("a", 10)], epsilon=0.3)
    assert len(detect(calm, policy, seed=5)) == 1
    assert len(detect(shifted, policy, seed=5)) == 0


def test_confidence_band():
    confs = []
    for i in range(2000):
        f = make_frame(i, [truth("a", 10)])
        confs.extend(d.confidence for d in detect(f, NoMiss(), seed=11))
    confs = np.array(confs)
    assert confs.min() >= 0.5
    assert confs.max() <= 0.95
    assert abs(confs.mean() - 0.725) < 0.01


def test_noise_moments_match_sigma():
    noise = NoiseParams(sigma_center=0.15, sigma_log_size=0.03, sigma_yaw=0.02)
    dxs, dls, dyaws = [], [], []
    for i in range(10_000):
        f = make_frame(i, [truth("a", 10)])
        (d,) = detect(f, NoMiss(), seed=13, noise=noise)
        dxs.append(d.box.center[0] - 10.0)
        dls.append(math.log(d.box.size[0] / 4.5))
        dyaws.append(d.box.yaw - 0.1)
    assert abs(np.std(dxs) - 0.15) / 0.15 < 0.1
    assert abs(np.std(dls) - 0.03) / 0.03 < 0.1
    assert abs(np.std(dyaws) - 0.02) / 0.02 < 0.1
    assert abs(np.mean(dxs)) < 0.01


def test_box_stays_valid_under_noise():
    for i in range(100):
        f = make_frame(i, [truth("a", 10)])
        (d,) = detect(f, NoMiss(), seed=17)
        assert all(s > 0 for s in d.box.size)
        assert -math.pi <= d.box.yaw < math.pi


def test_detection_from_prompt_flag():
    b = Box3D(center=(0, 0, 1), size=(1, 1, 1), yaw=0)
    assert not Detection(b, 0.5, "base").from_prompt
    assert Detection(b, 0.5, "prompt:p01").from_prompt


def test_policy_serialization_round_trip():
    policies = [
        NoMiss(),
        DistantMiss(25.0, 0.7),
        ClassMiss(("car", "van"), 0.9),
        UnseenClass(("truck",)),
        DomainShift(0.28, 0.6),
    ]
    for p in policies:
        assert policy_from_dict(policy_to_dict(p)) == p
    with pytest.raises(ValueError):
        policy_from_dict({"kind": "bogus"})
