import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from percsplat import densify as D
from percsplat.model import Camera, GaussianSet, TrainConfig, View, logit, sigmoid, validate
from percsplat.render import render


def with_sens(values, weights=None):
    n = len(values)
    gs = GaussianSet.init_random(n, np.random.default_rng(0))
    gs.sensitivity_logits[:] = logit(np.asarray(values, float))
    if weights is not None:
        gs.max_view_weight[:] = weights
    return gs


# -- selection -----------------------------------------------------------------

def test_select_high_examples():
    gs = with_sens([0.5] * 4)
    assert D.select_high(gs, 0.9).size == 0
    gs = with_sens([0.95, 0.91, 0.9, 0.2])
    assert D.select_high(gs, 0.9).tolist() == [0, 1]


def test_select_medium_boundaries():
    gs = with_sens([0.9, 0.3, 0.29, 0.95])
    # thresholds taken from the stored values so sigma == tau holds exactly
    tau_h, tau_l = float(gs.sensitivities[0]), float(gs.sensitivities[1])
    assert D.select_medium(gs, tau_l, tau_h).tolist() == [0, 1]
    assert D.select_high(gs, tau_h).tolist() == [3]


def test_gate_by_weight_examples():
    gs = with_sens([0.95, 0.95, 0.95], weights=[25.0, 25.5, 0.0])
    assert D.gate_by_weight([0, 1, 2], gs, 25.0).tolist() == [1]
    gs.max_view_weight[:] = 0
    assert D.gate_by_weight([0, 1, 2], gs, 10.0).size == 0


@given(st.integers(0, 2**32 - 1))
def test_selection_matches_filter_oracle(seed):
    rng = np.random.default_rng(seed)
    gs = GaussianSet.init_random(1000, rng)
    gs.sensitivity_logits[:] = rng.normal(0, 2.5, 1000)
    gs.max_view_weight[:] = rng.uniform(0, 40, 1000)
    s = sigmoid(gs.sensitivity_logits)
    cfg = TrainConfig()
    high = [i for i in range(1000) if s[i] > cfg.tau_h]
    med = [i for i in range(1000) if cfg.tau_l <= s[i] <= cfg.tau_h]
    assert D.select_high(gs, cfg.tau_h).tolist() == high
    assert D.select_medium(gs, cfg.tau_l, cfg.tau_h).tolist() == med
    assert not set(high) & set(med)
    d_h, d_m = D.perceptual_selection(gs, cfg)
    assert d_h.tolist() == [i for i in high if gs.max_view_weight[i] > cfg.tau_h_omega]
    assert d_m.tolist() == [i for i in med if gs.max_view_weight[i] > cfg.tau_m_omega]


def test_constructed_ten_primitive_selection():
    s = [0.95, 0.95, 0.92, 0.9, 0.5, 0.3, 0.31, 0.1, 0.99, 0.6]
    w = [30, 25, 26, 30, 11, 10, 12, 50, 24.9, 9]
    gs = with_sens(s, w)
    assert [i for i in range(10) if sigmoid(gs.sensitivity_logits[i]) > 0.9] == [0, 1, 2, 8]
    d_h, d_m = D.perceptual_selection(gs, TrainConfig())
    # G_h ∩ {w > 25} and G_m ∩ {w > 10}
    assert d_h.tolist() == [0, 2]
    assert d_m.tolist() == [3, 4, 6]


# -- opacity decline -------------------------------------------------------------

def test_od_endpoints_and_root():
    for k in (1.0, 1.2, 1.5, 2.0):
        assert D.od_transform(0.0, k) == 0.0 and D.od_transform(1.0, k) == 1.0
    root = brentq(lambda a: a + (1 - a) * a - 0.5 ** 1.2, 0, 1, xtol=1e-15)
    assert abs(D.od_transform(0.5, 1.2) - root) < 1e-12
    assert abs(D.od_transform(0.5, 1.2) - 0.248518) < 5e-7


@given(st.floats(0, 1), st.sampled_from([1.0, 1.2, 1.5, 2.0]))
def test_od_composes_to_power(alpha, k):
    a_hat = D.od_transform(alpha, k)
    assert abs(D.composed_opacity(a_hat) - alpha ** k) < 1e-12
    assert alpha ** k <= alpha + 1e-15


def test_k_one_is_identity():
    alpha = np.linspace(0, 1, 1001)
    assert np.max(np.abs(D.composed_opacity(D.od_transform(alpha, 1.0)) - alpha)) < 1e-12


def test_clone_with_od_example():
    gs = GaussianSet.init_random(3, np.random.default_rng(1))
    gs.opacity_logits[1] = logit(0.9)
    out, origin = D.clone_with_od(gs, [1], 1.2)
    assert len(out) == 4 and origin.tolist() == [0, 1, 2, -1]
    a_hat = 1 - math.sqrt(1 - 0.9 ** 1.2)
    for row in (1, 3):
        assert abs(sigmoid(out.opacity_logits[row]) - a_hat) < 1e-12
    assert abs(D.composed_opacity(sigmoid(out.opacity_logits[1])) - 0.9 ** 1.2) < 1e-12
    for name in ("means", "log_scales", "rotations", "colors", "sensitivity_logits"):
        assert np.array_equal(getattr(out, name)[3], getattr(gs, name)[1])
    same, _ = D.clone_with_od(gs, [], 1.2)
    assert len(same) == 3 and np.array_equal(same.opacity_logits, gs.opacity_logits)


def test_clone_logit_clamped():
    gs = GaussianSet.init_random(1, np.random.default_rng(2))
    gs.opacity_logits[0] = 30.0
    out, _ = D.clone_with_od(gs, [0], 1.0)
    assert np.all(np.abs(out.opacity_logits) <= 12.0)
    assert validate(out) == []


# -- split ---------------------------------------------------------------------

def test_split_counts_and_inheritance():
    rng = np.random.default_rng(3)
    gs = GaussianSet.init_random(10, rng)
    same, origin = D.split(gs, [], rng)
    assert len(same) == 10 and origin.tolist() == list(range(10))
    out, origin = D.split(gs, [2, 5, 7], rng)
    assert len(out) == 13
    assert origin.tolist() == [0, 1, 3, 4, 6, 8, 9] + [-1] * 6
    kids = out.take(np.arange(7, 13))
    parents = np.repeat([2, 5, 7], 2)
    assert np.allclose(kids.log_scales, gs.log_scales[parents] - math.log(1.6))
    for name in ("rotations", "colors", "opacity_logits", "sensitivity_logits"):
        assert np.array_equal(getattr(kids, name), getattr(gs, name)[parents])


def test_split_children_sample_parent_density():
    rng = np.random.default_rng(4)
    gs = GaussianSet.init_random(1, rng)
    gs.log_scales[0] = np.log([0.3, 0.1, 0.05])
    reps = 10_000
    kids = np.concatenate([D.split(gs, [0], rng)[0].means for _ in range(reps)])
    from percsplat.render import quat_to_rotmat
    rot = quat_to_rotmat(gs.rotations)[0]
    cov = rot @ np.diag(np.exp(2 * gs.log_scales[0])) @ rot.T
    se = np.sqrt(np.diag(cov) / len(kids))
    assert np.all(np.abs(kids.mean(axis=0) - gs.means[0]) < 3 * se)
    assert np.allclose(np.cov(kids.T), cov, rtol=0.1, atol=1e-3)


def test_split_deterministic():
    gs = GaussianSet.init_random(20, np.random.default_rng(5))
    a, _ = D.split(gs, [1, 4], np.random.default_rng(9))
    b, _ = D.split(gs, [1, 4], np.random.default_rng(9))
    assert a.means.tobytes() == b.means.tobytes()


# -- prune / reset -------------------------------------------------------------

def test_prune_and_reset():
    gs = GaussianSet.init_random(5, np.random.default_rng(6))
    gs.opacity_logits[:] = logit(np.array([0.001, 0.5, 0.004, 0.005, 0.9]))
    out, keep = D.prune(gs, 0.005)
    assert keep.tolist() == [1, 3, 4]
    D.reset_opacity(out)
    assert np.allclose(out.opacities, 0.01)


# -- schedules -----------------------------------------------------------------

def test_vanilla_adc_zero_stats_no_change():
    gs = GaussianSet.init_random(6, np.random.default_rng(7))
    gs.opacity_logits[:] = 0.0
    out, origin, events = D.vanilla_adc(gs, TrainConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == 6 and origin.tolist() == list(range(6))
    assert [e.kind for e in events] == ["adc", "prune"]


def test_vanilla_adc_rules():
    cfg = TrainConfig()
    gs = GaussianSet.init_random(4, np.random.default_rng(8))
    gs.opacity_logits[:] = logit(np.array([0.5, 0.5, 0.5, 0.001]))
    gs.log_scales[0] = np.log(0.001)  # small: clone
    gs.log_scales[1] = np.log(0.5)    # large: split
    gs.accum_posgrad_norm[:] = [1e-3, 1e-3, 1e-5, 0]
    gs.accum_denom[:] = [1, 1, 1, 1]
    out, origin, events = D.vanilla_adc(gs, cfg, 1.0, np.random.default_rng(0))
    adc, prune = events
    assert adc.extra == {"n_clone": 1, "n_split": 1} and adc.selected_indices == [0, 1]
    assert (adc.n_before, adc.n_after) == (4, 6)
    # rows after surgery: 0, 2, 3, clone(0), child, child; prune drops row 3 (alpha 0.001)
    assert prune.selected_indices == [2] and len(out) == 5
    assert origin.tolist() == [0, 2, -1, -1, -1]
    assert np.all(out.accum_denom == 0)


@pytest.mark.parametrize("beta,op", [(0.9, "split"), (0.1, "clone")])
def test_perceptual_densify_branch(beta, op):
    s = [0.95, 0.95, 0.5, 0.5, 0.1]
    w = [30, 30, 20, 20, 50]
    gs = with_sens(s, w)
    out, origin, events = D.perceptual_densify(gs, beta, TrainConfig(), np.random.default_rng(0))
    h, m = events
    assert h.extra["op"] == op and h.selected_indices == [0, 1] and m.selected_indices == [2, 3]
    if op == "split":
        assert len(out) == 5 + 4 and origin.tolist() == [4] + [-1] * 8
    else:
        assert len(out) == 5 + 4 and origin.tolist() == [0, 1, 4] + [-1] * 6
    assert h.n_after == 7 and m.n_before == 7 and m.n_after == len(out)
    rec = json.loads(h.to_json())
    assert rec["kind"] == "perceptual_h" and rec["n_selected"] == 2


def test_disable_od_keeps_opacity():
    gs = with_sens([0.95], [30])
    gs.opacity_logits[0] = logit(0.7)
    out, _, _ = D.perceptual_densify(gs, 0.1, TrainConfig(disable_od=True), np.random.default_rng(0),
                                     do_medium=False)
    assert abs(D.composed_opacity(sigmoid(out.opacity_logits[0])) - 0.7) < 1e-12


# -- reinit gate ---------------------------------------------------------------

def test_reinit_gate_nearest_rank():
    gs = GaussianSet.init_random(8, np.random.default_rng(9))
    gs.log_scales[:] = np.log(np.arange(1, 9, dtype=float))[:, None] - np.array([0, 1, 2])
    gs.sensitivity_logits[:] = logit(0.95)
    gs.sensitivity_logits[6] = 0.0  # primitive with s_max = 7 is medium
    gamma, fire = D.reinit_gate(gs, 0.3, 0.9, 0.55)
    assert gamma == 0.5 and fire is False


def test_reinit_gate_extremes():
    gs = GaussianSet.init_random(12, np.random.default_rng(10))
    gs.sensitivity_logits[:] = 0.0
    assert D.reinit_gate(gs, 0.3, 0.9, 0.55) == (1.0, True)
    gs.sensitivity_logits[:] = 5.0
    assert D.reinit_gate(gs, 0.3, 0.9, 0.55) == (0.0, False)
    gamma, fire = D.reinit_gate(GaussianSet.empty(), 0.3, 0.9, 0.55)
    assert math.isnan(gamma) and fire is False


@given(st.integers(0, 2**32 - 1), st.integers(1, 1000))
def test_reinit_gate_oracle(seed, n):
    rng = np.random.default_rng(seed)
    gs = GaussianSet.init_random(n, rng)
    gs.log_scales[:] = np.round(rng.normal(-2, 1, (n, 3)), 1)  # ties on purpose
    gs.sensitivity_logits[:] = rng.normal(0, 2, n)
    s_max = [math.exp(max(row)) for row in gs.log_scales.tolist()]
    q3 = sorted(s_max)[math.ceil(0.75 * n) - 1]
    large = [i for i in range(n) if s_max[i] > q3]
    sig = sigmoid(gs.sensitivity_logits)
    med = {i for i in range(n) if 0.3 <= sig[i] <= 0.9}
    gamma, fire = D.reinit_gate(gs, 0.3, 0.9, 0.55)
    if not large:
        assert math.isnan(gamma) and not fire
    else:
        assert gamma == len([i for i in large if i in med]) / len(large)
        assert fire == (gamma > 0.55)


# -- initialization / reinit -------------------------------------------------

def test_knn_grid_pitch_and_fallback():
    g = np.stack(np.meshgrid(*[np.arange(5) * 0.25] * 3, indexing="ij"), -1).reshape(-1, 3)
    d = D.knn_mean_distance(g, 3)
    assert np.all(np.abs(d - 0.25) < 1e-9)
    assert D.knn_mean_distance(np.zeros((1, 3)), 3, fallback=0.03).tolist() == [0.03]


def test_depth_reinit_keeps_set_without_samples():
    cam = Camera(20, 20, 8, 8, 16, 16, np.eye(4))
    gs = GaussianSet.init_random(3, np.random.default_rng(11))
    gs.means[:, 2] = -5  # all behind the camera
    view = View(cam, np.zeros((16, 16, 3)), np.zeros((16, 16)))
    assert D.depth_reinit(gs, [view]) is gs


def test_depth_reinit_single_opaque_surface():
    cam = Camera(20, 20, 8, 8, 16, 16, np.eye(4))
    # a thin, wide, near-opaque disc facing the camera at depth 2
    gs = GaussianSet(means=[[0, 0, 2.0]], log_scales=np.log([[5.0, 5.0, 1e-4]]),
                     rotations=[[1.0, 0, 0, 0]], colors=[[0.2, 0.4, 0.6]],
                     opacity_logits=[logit(0.999)], sensitivity_logits=[2.0])
    gt = np.random.default_rng(12).random((16, 16, 3))
    view = View(cam, gt, np.zeros((16, 16)))
    out = D.depth_reinit(gs, [view], stride=4)
    acc = render(gs, cam).accum_alpha
    expected = int((acc[::4, ::4] > 0.5).sum())
    assert len(out) == expected == 16
    assert np.all(np.abs(out.means[:, 2] - 2.0) < 1e-2)
    assert np.allclose(out.colors, gt[::4, ::4].reshape(-1, 3))
    assert np.all(out.sensitivity_logits == 0) and np.allclose(out.opacities, 0.1)
    assert np.all(out.rotations == [1, 0, 0, 0])
    assert np.allclose(out.scales[:, 0], out.scales[:, 1])


def test_surgery_deterministic_given_seed():
    gs = with_sens([0.95, 0.5, 0.95, 0.5], [30, 20, 30, 20])
    a = D.perceptual_densify(gs, 0.9, TrainConfig(), np.random.default_rng(3))[0]
    b = D.perceptual_densify(gs, 0.9, TrainConfig(), np.random.default_rng(3))[0]
    for name in GaussianSet.PARAMS:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
