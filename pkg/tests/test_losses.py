import math

import numpy as np
import pytest

from debias import diffcore as dc
from debias import losses
from debias import model

LN2 = math.log(2.0)


def make_params(seed=0, d_in=4, d=6, m=4):
    return model.init_params(d_in, d, m, seed)


def one_sample_trace(params, seed=1, h=2, w=2):
    fm = np.random.default_rng(seed).normal(size=(h, w, params.d_in))
    return model.forward(params, fm), fm


# ---------------------------------------------------------------------------
# BCE family


def test_bce_saturated_correct_prediction_vanishes():
    logits = dc.constant(np.array([[40.0]]))
    assert float(losses.bce(logits, np.array([[1.0]])).value) < 1e-12


def test_bce_at_half_is_ln2():
    logits = dc.constant(np.zeros((1, 3)))
    val = float(losses.bce(logits, np.array([[1.0, 0.0, 1.0]])).value)
    assert val == pytest.approx(LN2, abs=1e-15)


def test_bce_rejects_nonbinary_targets():
    with pytest.raises(ValueError):
        losses.bce(dc.constant(np.zeros((1, 2))), np.array([[0.5, 1.0]]))


def test_bce_gradient_checks_out():
    rng = np.random.default_rng(2)
    t = (rng.random((3, 4)) < 0.5).astype(float)

    def build(lv):
        return losses.bce(lv["z"], t)

    z = rng.uniform(-2.0, 2.0, size=(3, 4))
    assert dc.finite_diff_check(build, {"z": z}, eps=1e-5) < 1e-6


def test_weighted_bce_identity_at_one():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, 3))
    t = (rng.random((2, 3)) < 0.5).astype(float)
    plain = losses.bce(dc.constant(z), t)
    weighted = losses.weighted_bce(dc.constant(z), t, 1.0)
    assert float(plain.value) == float(weighted.value)  # bit-for-bit


def test_weighted_bce_doubles_ln2():
    val = losses.weighted_bce(dc.constant(np.zeros((1, 1))), np.array([[1.0]]), 2.0)
    assert float(val.value) == pytest.approx(2 * LN2, abs=1e-15)


def test_weighted_bce_rejects_small_alpha():
    with pytest.raises(ValueError):
        losses.weighted_bce(dc.constant(np.zeros((1, 1))), np.array([[1.0]]), 0.5)


def test_weighted_bce_gradient_is_scaled_plain_gradient():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(2, 3))
    t = (rng.random((2, 3)) < 0.5).astype(float)
    za = dc.leaf(z)
    zb = dc.leaf(z)
    ga = dc.eval_backward(losses.bce(za, t))[za]
    gb = dc.eval_backward(losses.weighted_bce(zb, t, 5.0))[zb]
    assert np.allclose(gb, 5.0 * ga, atol=1e-15)


def test_weighted_bce_batch_matches_per_sample():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 2))
    t = (rng.random((3, 2)) < 0.5).astype(float)
    w = np.array([1.0, 4.0, 2.5])
    batch = float(losses.weighted_bce_batch(dc.constant(z), t, w).value)
    per = [
        float(losses.weighted_bce(dc.constant(z[i : i + 1]), t[i : i + 1], w[i]).value)
        for i in range(3)
    ]
    assert batch == pytest.approx(np.mean(per), abs=1e-14)


# ---------------------------------------------------------------------------
# alpha weighting


def test_alpha_arithmetic_cases():
    labels = np.zeros((104, 2), dtype=int)
    labels[:100, 0] = 1
    labels[:100, 1] = 1
    labels[100:, 0] = 1  # 100 co-occur, 4 exclusive
    table = losses.build_alpha_table(labels, [(0, 1)], alpha_min=3.0)
    assert table.stats[0].alpha == pytest.approx(5.0)

    flipped = np.zeros((104, 2), dtype=int)
    flipped[:4, 0] = 1
    flipped[:4, 1] = 1
    flipped[4:, 0] = 1  # 4 co-occur, 100 exclusive: raw 0.2, clamped
    table = losses.build_alpha_table(flipped, [(0, 1)], alpha_min=3.0)
    assert table.stats[0].alpha == pytest.approx(3.0)


def test_alpha_for_sample_routing():
    labels = np.zeros((20, 4), dtype=int)
    labels[:16, 0] = 1
    labels[:16, 1] = 1
    labels[16:, 0] = 1
    labels[:10, 2] = 1
    labels[:9, 3] = 1
    labels[9, 3] = 0  # sample 9 exclusive for (2,3)
    table = losses.build_alpha_table(labels, [(0, 1), (2, 3)], alpha_min=2.0)
    a01 = table.stats[0].alpha
    a23 = table.stats[1].alpha
    assert losses.alpha_for(labels[0], table) == 1.0  # co-occurs for both
    assert losses.alpha_for(labels[16], table) == a01
    assert losses.alpha_for(labels[9], table) == max(a23, 1.0)
    # a sample exclusive for several pairs takes the largest weight
    row = np.array([1, 0, 1, 0])
    assert losses.alpha_for(row, table) == max(a01, a23)


def test_alpha_table_requires_populated_sets():
    labels = np.array([[1, 1], [1, 1]])
    with pytest.raises(ValueError):
        losses.build_alpha_table(labels, [(0, 1)])


def test_alpha_min_must_exceed_one():
    labels = np.array([[1, 1], [1, 0]])
    with pytest.raises(ValueError):
        losses.build_alpha_table(labels, [(0, 1)], alpha_min=1.0)


def test_exclusive_mask_or_semantics():
    labels = np.array(
        [
            [1, 1, 0, 0],  # co-occur for (0,1)
            [1, 0, 0, 0],  # exclusive for (0,1)
            [1, 1, 1, 0],  # co-occur for (0,1), exclusive for (2,3)
            [0, 0, 0, 1],  # neither pair applies
        ]
    )
    mask = losses.exclusive_mask(labels, [(0, 1), (2, 3)])
    assert mask.tolist() == [False, True, True, False]


# ---------------------------------------------------------------------------
# CAM losses


def constant_map_setup(v=1.0):
    # both categories produce a flat positive map of height v
    params = model.ModelParams(
        mixer=np.eye(2),
        head=np.array([[v, v, 0.0], [0.0, 0.0, 0.0]]),
        own_rows=[0],
        context_rows=[1],
    )
    fm = np.zeros((2, 2, 2))
    fm[:, :, 0] = 1.0
    return params, model.forward(params, fm), fm


def test_overlap_of_flat_maps_is_one():
    params, trace, _ = constant_map_setup()
    val = float(losses.cam_overlap_loss(params, trace, [(0, 1)]).value)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_overlap_of_disjoint_maps_is_zero():
    params = model.ModelParams(
        mixer=np.eye(2),
        head=np.array([[1.0, 0.0], [0.0, 1.0]]),
        own_rows=[0],
        context_rows=[1],
    )
    fm = np.zeros((2, 2, 2))
    fm[0, :, 0] = 1.0  # category 0 lives in the top row
    fm[1, :, 1] = 1.0  # category 1 in the bottom row
    trace = model.forward(params, fm)
    assert float(losses.cam_overlap_loss(params, trace, [(0, 1)]).value) == 0.0


def test_overlap_loss_nonnegative_random():
    rng = np.random.default_rng(6)
    params = make_params(seed=7)
    for _ in range(10):
        fm = rng.normal(size=(3, 3, params.d_in))
        trace = model.forward(params, fm)
        assert float(losses.cam_overlap_loss(params, trace, [(0, 1)]).value) >= 0.0


def test_overlap_gradient_checks_out():
    rng = np.random.default_rng(8)
    fm = rng.uniform(-1.0, 1.0, size=(2, 2, 3))
    own = np.array([0, 1])
    ctx = np.array([2, 3])

    def build(lv):
        params = model.ModelParams(lv["mixer"].value, lv["head"].value, own, ctx)
        trace = trace_from_leaves(lv, fm)
        return losses.cam_overlap_loss(params, trace, [(0, 1)])

    p = {
        "mixer": rng.uniform(-1.0, 1.0, size=(3, 4)),
        "head": rng.uniform(-1.0, 1.0, size=(4, 3)),
    }
    assert dc.finite_diff_check(build, p, eps=1e-5) < 1e-6


def trace_from_leaves(lv, fm):
    """forward_batch wired to existing leaves, for finite-diff builders."""
    h, w, d_in = fm.shape
    p = h * w
    feats = dc.constant(fm.reshape(-1, d_in))
    rows = dc.matmul(feats, lv["mixer"])
    pooled = dc.gap_rows(rows, p)
    d = lv["mixer"].value.shape[1]
    half = d // 2
    return model.ForwardTrace(
        h=h,
        w=w,
        n=1,
        mixer_node=lv["mixer"],
        head_node=lv["head"],
        feature_rows=rows,
        pooled=pooled,
        pooled_own=dc.take(pooled, np.arange(half), axis=1),
        pooled_ctx=dc.take(pooled, np.arange(half, d), axis=1),
        logits=dc.matmul(pooled, lv["head"]),
    )


def test_ground_loss_zero_when_unchanged():
    params = make_params(seed=9)
    trace, fm = one_sample_trace(params, seed=10)
    snap = losses.CamSnapshot(params, [(0, 1)])
    rows = fm.reshape(-1, params.d_in)
    val = losses.cam_ground_loss(params, trace, snap, [(0, 1)], "k0", rows)
    assert float(val.value) == 0.0


def test_ground_loss_hand_case_two():
    # live maps all zero, frozen maps all one, single pair on a 2x2 grid
    params, trace, fm = constant_map_setup(v=0.0)

    class FakeSnapshot(losses.CamSnapshot):
        def rows(self, key, rows, category, normalized=True):
            return np.ones(4)

    snap = FakeSnapshot(params, [(0, 1)])
    val = losses.cam_ground_loss(
        params, trace, snap, [(0, 1)], "k", fm.reshape(-1, 2)
    )
    assert float(val.value) == pytest.approx(2.0, abs=1e-12)


def test_ground_gradient_checks_out_off_kinks():
    rng = np.random.default_rng(11)
    fm = rng.uniform(0.5, 1.5, size=(2, 2, 3))
    own = np.array([0, 1])
    ctx = np.array([2, 3])
    pre_b = np.full(4, 2.0)  # far from any live value, so |.| has no kink
    pre_c = np.full(4, -1.0)

    def build(lv):
        params = model.ModelParams(lv["mixer"].value, lv["head"].value, own, ctx)
        trace = trace_from_leaves(lv, fm)
        return dc.mean_all(
            losses.cam_ground_terms(params, trace, 0, 1, [0], pre_b, pre_c)
        )

    p = {
        "mixer": rng.uniform(0.5, 1.5, size=(3, 4)),
        "head": rng.uniform(0.5, 1.5, size=(4, 3)),
    }
    assert dc.finite_diff_check(build, p, eps=1e-5) < 1e-6


def test_total_loss_degenerates_to_bce():
    params = make_params(seed=12)
    trace, fm = one_sample_trace(params, seed=13)
    t = np.array([[1.0, 0.0, 1.0, 0.0]])
    snap = losses.CamSnapshot(params, [(0, 1)])
    total = losses.cam_total_loss(
        params, trace, snap, [(0, 1)], t, 0.0, 0.0, "k", fm.reshape(-1, params.d_in)
    )
    plain = losses.bce(trace.logits, t)
    assert float(total.value) == float(plain.value)


def test_total_loss_composes_components():
    params = make_params(seed=14)
    trace, fm = one_sample_trace(params, seed=15)
    rows = fm.reshape(-1, params.d_in)
    t = np.array([[1.0, 1.0, 0.0, 0.0]])
    snap = losses.CamSnapshot(
        model.init_params(params.d_in, params.d, params.m, 99), [(0, 1)]
    )
    lo = float(losses.cam_overlap_loss(params, trace, [(0, 1)]).value)
    lr = float(
        losses.cam_ground_loss(params, trace, snap, [(0, 1)], "k", rows).value
    )
    lb = float(losses.bce(trace.logits, t).value)
    total = losses.cam_total_loss(
        params, trace, snap, [(0, 1)], t, 0.1, 0.01, "k", rows
    )
    assert float(total.value) == pytest.approx(lb + 0.1 * lo + 0.01 * lr, abs=1e-14)


def test_total_loss_rejects_negative_weights():
    params = make_params()
    trace, _ = one_sample_trace(params)
    with pytest.raises(ValueError):
        losses.cam_total_loss(params, trace, None, [], np.zeros((1, 4)), -0.1, 0.0)


def test_snapshot_is_frozen_and_cached():
    params = make_params(seed=16)
    snap = losses.CamSnapshot(params, [(0, 1)])
    rows = np.random.default_rng(17).normal(size=(4, params.d_in))
    before = snap.normalized_rows("s", rows, 0)
    params.head[:] = 0.0  # later training must not leak into the snapshot
    after = snap.normalized_rows("s", rows, 0)
    assert np.array_equal(before, after)
    with pytest.raises(ValueError):
        snap.normalized_rows("s", rows, 3)


# ---------------------------------------------------------------------------
# running-mean buffer


def test_running_mean_window_arithmetic():
    buf = losses.RunningMeanBuffer(width=1, window=10)
    for v in range(1, 11):
        losses.update_running_mean(buf, np.array([float(v)]))
    losses.update_running_mean(buf, np.array([11.0]))
    assert buf.mean()[0] == pytest.approx(6.5)  # mean of 2..11


def test_running_mean_single_and_empty():
    buf = losses.RunningMeanBuffer(width=3)
    assert np.array_equal(buf.mean(), np.zeros(3))
    v = np.array([1.0, 2.0, 3.0])
    losses.update_running_mean(buf, v)
    assert np.array_equal(buf.mean(), v)


def test_running_mean_rejects_bad_length():
    buf = losses.RunningMeanBuffer(width=2)
    with pytest.raises(ValueError):
        losses.update_running_mean(buf, np.ones(3))


# ---------------------------------------------------------------------------
# suppressed forward


def test_suppressed_zero_buffer_keeps_own_half_only():
    params = make_params(seed=18)
    trace, _ = one_sample_trace(params, seed=19)
    buf = losses.RunningMeanBuffer(width=params.d // 2)
    logits = losses.suppressed_forward(params, trace, buf, is_exclusive=True)
    own_only = trace.pooled_own.value @ params.head[params.own_rows]
    assert np.allclose(logits.value, own_only, atol=1e-15)


def test_suppressed_nonexclusive_matches_plain_forward():
    params = make_params(seed=20)
    trace, _ = one_sample_trace(params, seed=21)
    buf = losses.RunningMeanBuffer(width=params.d // 2)
    losses.update_running_mean(buf, np.full(params.d // 2, 9.9))  # must be ignored
    logits = losses.suppressed_forward(params, trace, buf, is_exclusive=False)
    assert np.max(np.abs(logits.value - trace.logits.value)) < 1e-12


def test_suppressed_gradients_vanish_for_context_half():
    params = make_params(seed=22)
    rng = np.random.default_rng(23)
    feats = rng.normal(size=(3, 4, params.d_in))  # batch of 3, all exclusive
    trace = model.forward_batch(params, feats, 2, 2)
    buf = losses.RunningMeanBuffer(width=params.d // 2)
    losses.update_running_mean(buf, rng.normal(size=params.d // 2))
    t = (rng.random((3, params.m)) < 0.5).astype(float)
    logits = losses.suppressed_logits(params, trace, np.ones(3, bool), buf)
    gmap = dc.eval_backward(losses.bce(logits, t))
    g_head = gmap[trace.head_node]
    g_mixer = gmap[trace.mixer_node]
    assert np.array_equal(g_head[params.context_rows], np.zeros((params.d // 2, params.m)))
    assert np.abs(g_head[params.own_rows]).max() > 0.0
    # mixer columns feeding the context half receive nothing either
    assert np.array_equal(g_mixer[:, params.context_rows], np.zeros((params.d_in, params.d // 2)))
    assert np.abs(g_mixer[:, params.own_rows]).max() > 0.0


def test_suppressed_mixed_batch_reassembles_order():
    params = make_params(seed=24)
    rng = np.random.default_rng(25)
    feats = rng.normal(size=(4, 4, params.d_in))
    trace = model.forward_batch(params, feats, 2, 2)
    buf = losses.RunningMeanBuffer(width=params.d // 2)
    mask = np.array([False, True, False, True])
    logits = losses.suppressed_logits(params, trace, mask, buf)
    for i in range(4):
        single = model.forward(params, feats[i].reshape(2, 2, params.d_in))
        want = losses.suppressed_forward(params, single, buf, bool(mask[i]))
        assert np.allclose(logits.value[i], want.value[0], atol=1e-12)


def test_suppressed_nonexclusive_gradients_match_plain_path():
    params = make_params(seed=26)
    rng = np.random.default_rng(27)
    feats = rng.normal(size=(2, 4, params.d_in))
    t = (rng.random((2, params.m)) < 0.5).astype(float)
    buf = losses.RunningMeanBuffer(width=params.d // 2)

    trace_a = model.forward_batch(params, feats, 2, 2)
    logits_a = losses.suppressed_logits(params, trace_a, np.zeros(2, bool), buf)
    ga = dc.eval_backward(losses.bce(logits_a, t))

    trace_b = model.forward_batch(params, feats, 2, 2)
    gb = dc.eval_backward(losses.bce(trace_b.logits, t))

    assert np.max(np.abs(ga[trace_a.head_node] - gb[trace_b.head_node])) < 1e-12
    assert np.max(np.abs(ga[trace_a.mixer_node] - gb[trace_b.mixer_node])) < 1e-12


def test_suppressed_path_gradient_checks_out():
    # finite differences over the own-half parameters; the context head rows
    # are analytically zeroed by design, so they are excluded
    rng = np.random.default_rng(28)
    fm = rng.uniform(-1.0, 1.0, size=(2, 2, 3))
    own = np.array([0, 1])
    ctx = np.array([2, 3])
    t = np.array([[1.0, 0.0, 1.0]])
    xbar = rng.uniform(-1.0, 1.0, size=2)

    def build(lv):
        params = model.ModelParams(lv["mixer"].value, lv["head"].value, own, ctx)
        trace = trace_from_leaves(lv, fm)
        buf = losses.RunningMeanBuffer(width=2)
        losses.update_running_mean(buf, xbar)
        logits = losses.suppressed_logits(params, trace, np.ones(1, bool), buf)
        return losses.bce(logits, t)

    p = {
        "mixer": rng.uniform(-1.0, 1.0, size=(3, 4)),
        "head": rng.uniform(-1.0, 1.0, size=(4, 3)),
    }
    assert dc.finite_diff_check(build, p, eps=1e-5, wrt=["mixer"]) < 1e-6
