import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binpose.errors import ContractError
from binpose.geometry import Box2D, Pose6D, sym_distance
from binpose.models import canonical_pose, zblock
from binpose.numerics import grad_check, softmax
from binpose.posehyp import (BinSpec, HeadConfig, PoseHeads, PoseHypothesis,
                             classification_loss, conceptual_combinations, decode_offset,
                             decode_translation, encode_offset, encode_pose_bins,
                             enumerate_hypotheses, offset_loss, offset_loss_batch, pose_nms,
                             read_hypotheses, roi_backward, roi_batch, roi_extract, select_top,
                             write_hypotheses)

CFG = HeadConfig.for_scene((0.2, 0.2, 0.06))
INTR = (300.0, 300.0, 64.0, 64.0)


def test_default_head_sizes():
    assert [s.count for s in CFG.heads.values()] == [30, 13, 30, 140]
    assert conceptual_combinations(CFG) == 30 * 13 * 30 * 140 == 1_638_000
    axial = HeadConfig.for_scene((0.2, 0.2, 0.06), axial=True)
    assert list(axial.heads) == ["yaw", "roll", "depth"]
    assert conceptual_combinations(axial) == 13 * 30 * 140


def test_depth_range_covers_camera_radii():
    diag = 2 * np.linalg.norm([0.2, 0.2, 0.06])
    assert CFG.depth.lo == pytest.approx(1.5 * diag)
    assert CFG.depth.hi == pytest.approx(3.5 * diag)


@pytest.mark.parametrize("spec", list(CFG.heads.values()))
def test_bin_roundtrip(spec):
    for k in range(spec.count):
        assert spec.encode(spec.center(k)) == k


def test_bin_errors_and_wrapping():
    yaw = CFG.yaw
    with pytest.raises(ContractError):
        yaw.encode(2.0)
    assert CFG.pitch.encode(2 * math.pi + 0.01) == 0
    assert CFG.pitch.encode(-0.01) == 29
    assert CFG.depth.encode(10.0, clamp=True) == 139
    with pytest.raises(ContractError):
        CFG.depth.encode(10.0)
    with pytest.raises(ContractError):
        BinSpec(0, 0, 1)


def test_roi_extract_aligned_copy():
    feats = np.random.default_rng(0).normal(size=(4, 16, 16))
    box = Box2D(4 * 3, 4 * 5, 28, 28)
    np.testing.assert_array_equal(roi_extract(feats, box), feats[:, 5:12, 3:10])
    np.testing.assert_array_equal(roi_extract(feats, box), roi_extract(feats, box))
    const = np.full((4, 16, 16), 2.5)
    np.testing.assert_array_equal(roi_extract(const, Box2D(0, 0, 64, 64)), 2.5)
    with pytest.raises(ContractError):
        roi_extract(feats, Box2D(0, 0, 1.5, 10))


def test_roi_batch_and_backward():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2, 3, 8, 8))
    boxes = [Box2D(0, 0, 28, 28), Box2D(4, 4, 10, 20)]
    patches, index = roi_batch(feats, [1, 0], boxes)
    np.testing.assert_array_equal(patches[0], roi_extract(feats[1], boxes[0]))
    np.testing.assert_array_equal(patches[1], roi_extract(feats[0], boxes[1]))
    up = rng.normal(size=patches.shape)
    d = roi_backward(up, index, feats.shape, np.float64)
    # adjoint identity: <patches(f), up> == <f, backward(up)>
    assert np.sum(patches * up) == pytest.approx(np.sum(feats * d))


def test_offset_decode_and_loss():
    box = Box2D(10, 20, 100, 50)
    assert decode_offset((0.5, 0.5), box) == (60, 45)
    assert encode_offset(decode_offset((0.3, -0.2), box), box) == pytest.approx((0.3, -0.2))
    assert offset_loss((60, 45), (65, 40), box) == pytest.approx(0.15)
    assert offset_loss((60, 45), (60, 45), box) == 0


def test_offset_loss_gradient():
    rng = np.random.default_rng(2)
    target = rng.uniform(0, 1, (6, 2))
    pred = target + rng.choice([-1, 1], (6, 2)) * rng.uniform(0.05, 0.3, (6, 2))
    assert grad_check(lambda p: offset_loss_batch(p, target), pred, eps=1e-6) < 1e-3


def test_classification_loss_values_and_gradient():
    logits = {"pitch": np.zeros((2, 30))}
    total, parts, _ = classification_loss(logits, {"pitch": [0, 5]})
    assert total == pytest.approx(math.log(30))
    confident = np.full((1, 30), -50.0)
    confident[0, 3] = 50.0
    assert classification_loss({"pitch": confident}, {"pitch": [3]})[0] < 1e-12
    with pytest.raises(ContractError):
        classification_loss({"pitch": np.zeros((1, 30))}, {"pitch": [30]})
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 13))
    targets = {"yaw": [0, 12, 5, 5]}
    err = grad_check(lambda z: (classification_loss({"yaw": z}, targets)[0],
                                classification_loss({"yaw": z}, targets)[2]["yaw"]), x)
    assert err < 1e-3


def test_heads_probabilities():
    heads = PoseHeads(CFG, in_features=12, hidden=8, rng=np.random.default_rng(0))
    for net in heads.nets.values():
        net.layers[-1].weight.value[...] = 0
    out = heads.forward(np.random.default_rng(1).normal(size=(3, 12)).astype(np.float32))
    probs = heads.probabilities(out)
    for name, spec in CFG.heads.items():
        np.testing.assert_allclose(probs[name], 1.0 / spec.count, rtol=1e-6)
    assert out["offset"].shape == (3, 2)


def test_heads_backward_matches_numeric():
    from binpose.numerics import float64_mode
    with float64_mode():
        heads = PoseHeads(CFG, in_features=6, hidden=5, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 6))
    bins = {"pitch": [1, 2], "yaw": [0, 3], "roll": [4, 4], "depth": [10, 100]}

    def loss(z):
        ctx = {}
        out = heads.forward(z, ctx)
        total, _, grads = classification_loss({k: out[k] for k in bins}, bins)
        off, g_off = offset_loss_batch(out["offset"], np.full((2, 2), 0.5))
        grads["offset"] = g_off
        for p in heads.params:
            p.zero_grad()
        return total + off, heads.backward(z, grads, ctx)
    assert grad_check(loss, x, eps=1e-6) < 1e-6


def test_decode_translation():
    np.testing.assert_allclose(decode_translation((64, 64), 1.3, INTR), [0, 0, 1.3])
    np.testing.assert_allclose(decode_translation((64 + 300, 64), 1.0, INTR), [1, 0, 1])
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = rng.normal(0, 0.2, 3) + [0, 0, 1.4]
        uv = (INTR[0] * p[0] / p[2] + INTR[2], INTR[1] * p[1] / p[2] + INTR[3])
        np.testing.assert_allclose(decode_translation(uv, p[2], INTR), p, atol=1e-12)


def _probs(rng, cfg):
    return {n: softmax(rng.normal(0, 2, s.count)) for n, s in cfg.heads.items()}


def test_enumeration_counts_and_uniform_confidence():
    uniform = {n: np.full(s.count, 1.0 / s.count) for n, s in CFG.heads.items()}
    hyps = enumerate_hypotheses(uniform, (64, 64), CFG, INTR)
    assert len(hyps) == 81
    for h in hyps:
        assert h.confidence == pytest.approx(1 / 30 / 13 / 30 / 140)
    axial = HeadConfig.for_scene((0.2, 0.2, 0.06), axial=True)
    a = enumerate_hypotheses(_probs(np.random.default_rng(0), axial), (64, 64), axial, INTR)
    assert len(a) == 27 and all(h.pose.pitch == 0 for h in a)


def test_enumeration_matches_exhaustive_product():
    rng = np.random.default_rng(5)
    small = HeadConfig(pitch=BinSpec(5, 0, 2 * math.pi, True), yaw=BinSpec(4, -1.5, 1.5),
                       roll=BinSpec(5, 0, 2 * math.pi, True), depth=BinSpec(6, 1, 2))
    for _ in range(20):
        probs = {n: softmax(rng.normal(0, 3, s.count)) for n, s in small.heads.items()}
        hyps = enumerate_hypotheses(probs, (64, 64), small, INTR)
        names = list(small.heads)
        full = sorted((np.prod([probs[n][k] for n, k in zip(names, combo)]), combo)
                      for combo in itertools.product(*[range(small.heads[n].count)
                                                       for n in names]))[::-1]
        got = {tuple(h.bins[n] for n in names): h.confidence for h in hyps}
        for combo, c in got.items():
            assert c == pytest.approx(np.prod([probs[n][k] for n, k in zip(names, combo)]))
        # the best full-product combination is always enumerated
        assert full[0][1] in got


def test_confidence_monotone_in_head_probability():
    rng = np.random.default_rng(6)
    probs = _probs(rng, CFG)
    base = {tuple(h.bins.values()): h.confidence
            for h in enumerate_hypotheses(probs, (64, 64), CFG, INTR)}
    top = int(np.argmax(probs["yaw"]))
    bumped = dict(probs)
    bumped["yaw"] = probs["yaw"].copy()
    bumped["yaw"][top] *= 1.5
    after = {tuple(h.bins.values()): h.confidence
             for h in enumerate_hypotheses(bumped, (64, 64), CFG, INTR)}
    for key, c in after.items():
        if key[1] == top and key in base:
            assert c >= base[key]


def _hyp(pose, conf):
    return PoseHypothesis(pose, conf, 0, Box2D(0, 0, 10, 10))


def brute_pose_nms(hyps, model, thr):
    order = sorted(range(len(hyps)), key=lambda i: (-hyps[i].confidence, i))
    keep = []
    for i in order:
        if all(sym_distance(hyps[j].pose, hyps[i].pose, model) >= thr for j in keep):
            keep.append(i)
    return [hyps[i] for i in keep]


def test_pose_nms_cases():
    m = zblock()
    p = Pose6D(0.1, 0.2, 0.3, [0, 0, 1])
    q = Pose6D(0.1, 0.2, 0.3, [0.5, 0, 1])
    assert len(pose_nms([_hyp(p, 0.5), _hyp(p, 0.4)], m)) == 1
    assert len(pose_nms([_hyp(p, 0.5), _hyp(q, 0.4)], m)) == 2
    rng = np.random.default_rng(7)
    for _ in range(10):
        hyps = [_hyp(Pose6D(rng.uniform(0, 6), rng.uniform(-1, 1), rng.uniform(0, 6),
                            rng.normal(0, 0.005, 3) + [0, 0, 1]), rng.uniform())
                for _ in range(12)]
        thr = 0.05 * m.bsphere_diameter * 3
        full = brute_pose_nms(hyps, m, thr)
        assert pose_nms(hyps, m, thr) == full
        for limit in (1, 3, 5):
            assert pose_nms(hyps, m, thr, limit) == full[:limit]


def test_select_top():
    p = Pose6D(0, 0, 0, [0, 0, 1])
    three = [_hyp(p, c) for c in (0.2, 0.5, 0.1)]
    assert [h.confidence for h in select_top(three, 5)] == [0.5, 0.2, 0.1]
    ten = [_hyp(p, c) for c in np.linspace(0.1, 1.0, 10)]
    got = select_top(ten, 5)
    assert [h.confidence for h in got] == sorted([h.confidence for h in ten])[::-1][:5]
    ties = [_hyp(p, 0.3) for _ in range(7)]
    assert select_top(ties, 5) == ties[:5]


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(-1.5, 1.5),
       st.floats(0, 2 * math.pi, exclude_max=True), st.floats(-0.2, 0.2),
       st.floats(-0.2, 0.2), st.floats(1.0, 1.9))
def test_gt_bins_decode_within_half_bin(pitch, yaw, roll, x, y, z):
    m = zblock()
    pose = canonical_pose(Pose6D(pitch, yaw, roll, [x, y, z]), m)
    bins = encode_pose_bins(pose, CFG)
    u = INTR[0] * x / z + INTR[2]
    v = INTR[1] * y / z + INTR[3]
    box = Box2D(u - 10, v - 8, 20, 16)
    center = decode_offset(encode_offset((u, v), box), box)
    onehot = {n: np.eye(s.count)[bins[n]] for n, s in CFG.heads.items()}
    (best,) = [h for h in enumerate_hypotheses(onehot, center, CFG, INTR) if h.confidence == 1]
    for name in ("pitch", "yaw", "roll"):
        d = abs(getattr(best.pose, name) - getattr(pose, name))
        d = min(d, 2 * math.pi - d)
        assert d <= CFG.heads[name].width / 2 + 1e-9
    assert abs(best.pose.t[2] - z) <= CFG.depth.width / 2 + 1e-9
    np.testing.assert_allclose(best.pose.t[:2] / best.pose.t[2], [x / z, y / z], atol=1e-9)


def test_hypothesis_dump_roundtrip(tmp_path):
    hyps = [PoseHypothesis(Pose6D(0.1, 0.2, 0.3, [0, 0, 1]), 0.5, 2, Box2D(1, 2, 3, 4),
                           {"pitch": 1}, "f0", 1.25)]
    write_hypotheses(tmp_path / "h.jsonl", hyps)
    back = read_hypotheses(tmp_path / "h.jsonl")
    assert back[0].pose == hyps[0].pose and back[0].score == 1.25
    assert back[0].frame_id == "f0" and back[0].box == hyps[0].box
