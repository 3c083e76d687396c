import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from classfield.evaluation import mse_level
from classfield.generators import ConstantGenerator, load_generator
from classfield.hierarchy import Hierarchy, rollout
from classfield.learn import (AffineModel, ConstModel, MlpGenerator, MlpParams, PrefixDataset,
                              TrainConfig, TrainingFailure, affine_baseline, affine_from_layer,
                              avg_residual_baseline, canonicalize_children, child_order, fit,
                              init_mlp, learnable_const_baseline, mlp_forward, permute_children,
                              prefix_loss, save_training_curve, train_cfp, train_method)
from classfield.sampling import make_rng

C3 = np.array([[1.0, -0.5, -0.5], [0.0, 0.8, -0.8]])


@pytest.fixture(scope="module")
def const_h():
    return rollout(ConstantGenerator(C3), np.zeros(2), s=0.5, L=8)


def _numeric_grad(model, data, p, h=1e-5):
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + h
        up = prefix_loss(model, data, with_grad=False)
        p[i] = old - h
        dn = prefix_loss(model, data, with_grad=False)
        p[i] = old
        g[i] = (up - dn) / (2 * h)
    return g


def _random_data(rng, n, d, K):
    return PrefixDataset(rng.standard_normal((n, d)), rng.standard_normal((n, d, K)),
                         rng.uniform(0.1, 1.0, n), np.zeros(n, dtype=int))


def test_zero_network_outputs_zero():
    mlp = init_mlp(2, 3, hidden=8, rng=make_rng(0))
    for W, b in zip(mlp.weights, mlp.biases):
        W[:] = 0
        b[:] = 0
    assert np.array_equal(mlp_forward(mlp, np.ones(2)), np.zeros((2, 3)))


def test_output_reshape_is_column_major():
    mlp = MlpParams([np.zeros((2, 6))], [np.arange(6.0)], "relu", 2, 3)
    R = mlp_forward(mlp, np.zeros(2))
    assert R.tolist() == [[0, 2, 4], [1, 3, 5]]


def test_single_layer_equals_affine_map():
    layer = init_mlp(3, 2, depth=1, rng=make_rng(4))
    A, b = affine_from_layer(layer)
    X = make_rng(5).standard_normal((10, 3))
    ref = np.einsum("kij,nj->nik", A, X) + b
    assert np.allclose(layer.forward(X)[0], ref, atol=1e-14)


@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_backprop_matches_central_differences(activation):
    rng = make_rng(7)
    mlp = init_mlp(2, 3, hidden=6, depth=3, activation=activation, rng=rng)
    data = _random_data(rng, 8, 2, 3)
    # keep relu away from its kink so finite differences are meaningful
    while activation == "relu" and mlp.min_abs_preactivation(data.X) < 1e-3:
        data = _random_data(rng, 8, 2, 3)
    _, grads = prefix_loss(mlp, data)
    for p, g in zip(mlp.params, grads):
        num = _numeric_grad(mlp, data, p)
        assert np.allclose(g, num, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("make", [
    lambda rng: ConstModel(rng.standard_normal((2, 3))),
    lambda rng: AffineModel(rng.standard_normal((3, 2, 2)), rng.standard_normal((2, 3))),
])
def test_baseline_model_gradients(make):
    rng = make_rng(8)
    model = make(rng)
    data = _random_data(rng, 6, 2, 3)
    _, grads = prefix_loss(model, data)
    for p, g in zip(model.params, grads):
        assert np.allclose(g, _numeric_grad(model, data, p), rtol=1e-6, atol=1e-8)


def test_prefix_loss_example():
    data = PrefixDataset(np.zeros((1, 1)), np.array([[[1.0, -1.0]]]), np.array([0.5]), np.array([0]))
    model = ConstModel(np.array([[1.0, 1.0]]))
    # slot 1: 0.5 - 1, slot 2: 0.5 + 1
    assert prefix_loss(model, data, with_grad=False) == pytest.approx(0.25 + 2.25)


def test_prefix_dataset_counts(cfg0_h6):
    data = PrefixDataset.from_hierarchy(cfg0_h6, 3)
    assert len(data.X) == 1 + 3 + 9
    assert np.allclose(np.unique(data.a), [0.125, 0.25, 0.5])
    with pytest.raises(ValueError):
        PrefixDataset.from_hierarchy(cfg0_h6, 0)


def test_teacher_network_is_realizable():
    teacher = MlpGenerator(init_mlp(2, 3, rng=make_rng(99)))
    h = rollout(teacher, np.zeros(2), s=0.5, L=3)
    student = train_cfp(h, 3, TrainConfig(seed=1))
    assert student.history[-1] < 1e-6
    steps = np.diff(student.history)
    assert np.mean(steps <= 0) >= 0.95


def test_avg_baseline_recovers_constant_rule(const_h):
    g = avg_residual_baseline(const_h, 2)
    assert np.allclose(g.C, C3, atol=1e-14)


def test_avg_baseline_averages_four_parents(cfg0_h6):
    g = avg_residual_baseline(cfg0_h6, 2)
    res = [cfg0_h6.normalized_residuals(0)[0]] + list(cfg0_h6.normalized_residuals(1))
    assert len(res) == 4
    assert np.allclose(g.C, np.mean(res, axis=0), atol=1e-14)


def test_cfp_matches_avg_on_constant_hierarchy(const_h):
    cfp = train_cfp(const_h, 2)
    avg = avg_residual_baseline(const_h, 2)
    a = rollout(cfp, const_h.root, s=0.5, L=8)
    b = rollout(avg, const_h.root, s=0.5, L=8)
    for l in range(1, 9):
        assert mse_level(a.levels[l], b.levels[l]) < 1e-4


def test_learnable_const_fits_constant_data(const_h):
    # from the zero init Adam needs a few thousand extra steps to settle
    g = learnable_const_baseline(const_h, 2, TrainConfig(epochs=6000))
    assert g.history[-1] < 1e-8
    assert np.allclose(g.C, C3, atol=1e-4)


def _weighted_affine_oracle(data):
    # minimise sum a^2 ||A_k x + b_k - (y_k - x) / a||^2 slot by slot
    n, d, K = data.Y.shape
    D = np.hstack([data.X, np.ones((n, 1))]) * data.a[:, None]
    A, b = np.empty((K, d, d)), np.empty((d, K))
    for k in range(K):
        T = (data.Y[:, :, k] - data.X)
        sol, *_ = np.linalg.lstsq(D, T, rcond=None)
        A[k], b[:, k] = sol[:d].T, sol[d]
    return A, b


def test_affine_baseline_reaches_least_squares_optimum(cfg0_h6):
    data = PrefixDataset.from_hierarchy(cfg0_h6, 3)
    A, b = _weighted_affine_oracle(data)
    best = prefix_loss(AffineModel(A, b), data, with_grad=False)
    g = affine_baseline(cfg0_h6, 3, TrainConfig(lr=1e-2, epochs=20_000), init="zeros")
    assert g.history[-1] <= best * (1 + 1e-4) + 1e-12
    assert np.allclose(g.A, A, atol=1e-3) and np.allclose(g.b, b, atol=1e-3)


def test_affine_baseline_on_constant_data(const_h):
    g = affine_baseline(const_h, 3, TrainConfig(lr=1e-2, epochs=5000), init="zeros")
    assert np.abs(g.A).max() < 1e-3 and np.allclose(g.b, C3, atol=1e-3)


def test_affine_baseline_rejects_unknown_init(const_h):
    with pytest.raises(ValueError):
        affine_baseline(const_h, 2, init="xavier")


def test_training_is_deterministic(cfg0_h6):
    cfg = TrainConfig(epochs=200, seed=3)
    a, b = train_cfp(cfg0_h6, 2, cfg), train_cfp(cfg0_h6, 2, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.mlp.params, b.mlp.params))
    c = train_cfp(cfg0_h6, 2, replace(cfg, seed=4))
    assert not np.array_equal(a.mlp.weights[0], c.mlp.weights[0])


def test_training_reduces_loss(cfg0_h6):
    g = train_cfp(cfg0_h6, 2)
    assert g.history[-1] < 1e-6 * g.history[0]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="fixed-lr Adam oscillates once the prefix is nearly "
                   "interpolated; measured 84% non-increasing epochs pooled over default runs")
def test_loss_non_increasing_band_on_default_runs():
    from classfield.evaluation import MatchedConfig, sample_ground_truth

    cfg, inc, total = MatchedConfig(), 0, 0
    for t in range(cfg.trials):
        h, _, _ = sample_ground_truth(cfg, t)
        steps = np.diff(train_cfp(h.truncate(2), 2, TrainConfig(seed=t)).history)
        inc += int((steps > 0).sum())
        total += len(steps)
    assert 1 - inc / total >= 0.95


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_diverging_data_raises_training_failure():
    n = 4
    data = PrefixDataset(np.zeros((n, 2)), np.full((n, 2, 3), np.inf), np.ones(n), np.zeros(n))
    with pytest.raises(TrainingFailure) as info:
        fit(init_mlp(2, 3, hidden=4, rng=make_rng(0)), data, TrainConfig(epochs=5))
    assert len(info.value.history) == 1


def test_config_validation():
    for bad in (dict(lr=0), dict(epochs=0), dict(activation="tanh")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        train_method("knn", None, 2)


def test_learned_generator_round_trip(cfg0_h6, tmp_path):
    g = train_cfp(cfg0_h6, 2, TrainConfig(epochs=50, activation="gelu"))
    g.save(tmp_path / "g.json")
    g2 = load_generator(tmp_path / "g.json")
    X = make_rng(1).standard_normal((5, 2))
    assert isinstance(g2, MlpGenerator) and g2.natural_scale == 0.5
    assert np.array_equal(g(X), g2(X))
    save_training_curve(g.history, tmp_path / "curve.csv")
    rows = list(csv.reader((tmp_path / "curve.csv").open()))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 52


def test_affine_baseline_round_trip(cfg0_h6, tmp_path):
    g = affine_baseline(cfg0_h6, 2, TrainConfig(epochs=20))
    g.save(tmp_path / "a.json")
    X = make_rng(2).standard_normal((4, 2))
    assert np.array_equal(load_generator(tmp_path / "a.json")(X), g(X))


# --- canonicalization -------------------------------------------------------------

def test_collinear_children_use_coordinate_axes():
    h = rollout(ConstantGenerator(np.array([[-1.0, 1.0], [0.0, 0.0]])), np.zeros(2), s=0.5, L=2)
    can = canonicalize_children(h)
    assert can.fallback and can.notes
    # angle 0 comes before angle pi
    assert np.allclose(can.hierarchy.levels[1], [[0.5, 0.0], [-0.5, 0.0]])
    assert can.order[1].tolist() == [1, 0]


def test_child_order_breaks_angle_ties_by_length():
    kids = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert child_order(np.zeros(2), kids, np.eye(2)).tolist() == [1, 0, 2]


def _projected_angles(can, l, parent):
    h = can.hierarchy
    z = (h.children(l, parent) - h.levels[l][parent]) @ can.basis
    return np.arctan2(z[:, 1], z[:, 0])


def test_canonical_children_are_sorted_by_angle(cfg0_h6):
    can = canonicalize_children(cfg0_h6.truncate(4))
    for l in range(4):
        for p in range(3**l):
            assert np.all(np.diff(_projected_angles(can, l, p)) >= 0)


def test_canonicalization_moves_subtrees_along(cfg0_h6):
    can = canonicalize_children(cfg0_h6.truncate(4))
    h = can.hierarchy
    for l in range(4):
        assert np.allclose(h.levels[l + 1], cfg0_h6.levels[l + 1][can.order[l + 1]])
        # parent of a new node is the reordered parent of the old node
        old_parent = can.order[l + 1] // 3
        assert np.array_equal(can.order[l][np.arange(3 ** (l + 1)) // 3], old_parent)


def test_canonicalization_is_idempotent(cfg0_h6):
    once = canonicalize_children(cfg0_h6.truncate(4)).hierarchy
    twice = canonicalize_children(once).hierarchy
    assert twice.equals(once)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000))
def test_canonicalization_is_permutation_invariant(seed, cfg0_h6):
    h = cfg0_h6.truncate(4)
    shuffled = permute_children(h, make_rng(seed))
    a = canonicalize_children(h).hierarchy
    b = canonicalize_children(shuffled).hierarchy
    for x, y in zip(a.levels, b.levels):
        assert np.allclose(x, y, atol=1e-12)


def test_permutation_preserves_node_sets(cfg0_h6):
    shuffled = permute_children(cfg0_h6, make_rng(1))
    for x, y in zip(cfg0_h6.levels, shuffled.levels):
        assert np.array_equal(np.sort(x, axis=0), np.sort(y, axis=0))
    assert not shuffled.equals(cfg0_h6)


def test_canonicalization_needs_two_levels():
    h = Hierarchy(2, 3, 0.5, np.zeros(2), [np.zeros((1, 2))])
    with pytest.raises(ValueError):
        canonicalize_children(h)


def test_child_order_uses_native_atan2_range():
    deg = np.deg2rad([10.0, 200.0, 350.0])
    kids = np.stack([np.cos(deg), np.sin(deg)], axis=1)
    # atan2 maps these to 10, -160 and -10 degrees
    assert child_order(np.zeros(2), kids, np.eye(2)).tolist() == [1, 2, 0]


def test_sorted_children_keep_their_order():
    deg = np.deg2rad([-150.0, -20.0, 95.0])
    kids = np.stack([np.cos(deg), np.sin(deg)], axis=1)
    assert child_order(np.zeros(2), kids, np.eye(2)).tolist() == [0, 1, 2]


def test_constant_rule_and_its_average_roll_out_identically(const_h):
    avg = avg_residual_baseline(const_h, 2)
    again = rollout(avg, const_h.root, s=0.5, L=8)
    for x, y in zip(again.levels, const_h.levels):
        assert np.allclose(x, y, atol=1e-14)
