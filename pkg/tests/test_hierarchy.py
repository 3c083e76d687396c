import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from classfield.generators import ConstantGenerator, FunctionGenerator, LevelScaledGenerator
from classfield.hierarchy import (AdmissibilityViolation, Hierarchy, HierarchyParseError,
                                  HierarchyValidationError, address_to_index, ancestor_index,
                                  common_prefix_length, duplicate_groups, export_level_csv,
                                  index_to_address, load_hierarchy, near_duplicates, route,
                                  rollout, save_hierarchy, voronoi_cells)
from classfield.sampling import make_rng


@given(st.integers(1, 5), st.integers(0, 6), st.data())
def test_address_index_bijection(K, level, data):
    idx = data.draw(st.integers(0, K**level - 1))
    alpha = index_to_address(level, idx, K)
    assert len(alpha) == level and all(1 <= a <= K for a in alpha)
    assert address_to_index(alpha, K) == (level, idx)


def test_address_errors_and_prefix():
    with pytest.raises(ValueError):
        address_to_index((1, 4), 3)
    with pytest.raises(ValueError):
        index_to_address(2, 9, 3)
    assert common_prefix_length((1, 2, 3), (1, 2, 1, 1)) == 2
    assert common_prefix_length((), (2,)) == 0
    assert ancestor_index(np.array([7, 8]), 2, 1, 3).tolist() == [2, 2]


def test_constant_rollout_example():
    C = np.array([[1.0, -1.0], [0.0, 0.0]])
    h = rollout(ConstantGenerator(C), np.zeros(2), s=0.5, L=2)
    assert np.allclose(h.levels[1], [[0.5, 0], [-0.5, 0]])
    assert np.allclose(h.levels[2], [[0.75, 0], [0.25, 0], [-0.25, 0], [-0.75, 0]])
    assert np.allclose(h.node((1, 2)), [0.25, 0]) and np.allclose(h.node((2, 1)), [-0.25, 0])


def test_nonlinear_rollout_example():
    g = FunctionGenerator(lambda X: np.stack([X + 1.0, -X - 1.0], axis=2), 1, 2)
    h = rollout(g, np.array([1.0]), s=0.5, L=2)
    # x1 = 1 +- 0.5*2, then +- 0.25*(x1 + 1)
    assert np.allclose(h.levels[1].ravel(), [2.0, 0.0])
    assert np.allclose(h.levels[2].ravel(), [2.75, 1.25, 0.25, -0.25])


@given(st.integers(0, 100))
def test_children_follow_the_rule(seed):
    rng = make_rng(seed)
    M = rng.standard_normal((2, 2)) * 0.3
    g = FunctionGenerator(lambda X: np.stack([np.tanh(X @ M.T), np.cos(X), -X], axis=2), 2, 3)
    h = rollout(g, rng.standard_normal(2), s=0.6, L=4)
    for l in range(4):
        for p in range(0, 3**l, max(1, 3**l // 5)):
            x = h.levels[l][p]
            expect = x[:, None] + 0.6 ** (l + 1) * g(x)
            assert np.allclose(h.children(l, p), expect.T, atol=1e-13)


def test_scale_absorption_identity(cfg0):
    direct = rollout(cfg0, np.zeros(2), s=0.5, L=4)
    absorbed = rollout(LevelScaledGenerator(cfg0, 0.5), np.zeros(2), s=1.0, L=4, lambda_check=None)
    for a, b in zip(direct.levels, absorbed.levels):
        assert np.allclose(a, b, atol=1e-14)


def test_normalized_residuals_recover_the_rule(cfg0, cfg0_h6):
    R = cfg0_h6.normalized_residuals(3)
    assert R.shape == (27, 2, 3)
    assert np.allclose(R, cfg0(cfg0_h6.levels[3]), atol=1e-10)


def test_rollout_validation():
    g = ConstantGenerator(np.eye(2))
    with pytest.raises(ValueError):
        rollout(g, np.zeros(2), s=0.0, L=2)
    with pytest.raises(ValueError):
        rollout(g, np.zeros(2), s=1.5, L=2)
    with pytest.raises(ValueError):
        rollout(g, np.zeros(3), s=0.5, L=2)
    with pytest.raises(ValueError):
        rollout(g, np.zeros(2), s=0.5, L=30)
    with pytest.raises(AdmissibilityViolation):
        rollout(ConstantGenerator(2 * np.eye(2)), np.zeros(2), s=0.5, L=2, lambda_check=1.0)


def test_neural_rollout_stays_in_root_ball(cfg0_h6):
    X = cfg0_h6.all_nodes()
    assert np.linalg.norm(X, axis=1).max() <= 0.5 / (1 - 0.5) + 1e-12


def test_truncate_and_equality(cfg0_h6):
    t = cfg0_h6.truncate(3)
    assert t.depth == 3 and not t.equals(cfg0_h6)
    assert t.equals(cfg0_h6.truncate(3))


def test_hierarchy_validation():
    with pytest.raises(HierarchyValidationError):
        Hierarchy(2, 2, 0.5, np.zeros(2), [np.zeros((1, 2)), np.zeros((3, 2))])
    with pytest.raises(HierarchyValidationError):
        Hierarchy(2, 2, 0.5, np.zeros(2), [np.ones((1, 2))])


def test_save_load_round_trip(cfg0_h6, tmp_path):
    path = tmp_path / "h.json"
    save_hierarchy(cfg0_h6, path)
    assert load_hierarchy(path).equals(cfg0_h6)


def test_load_reports_parse_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"d": 2,')
    with pytest.raises(HierarchyParseError, match="line 1"):
        load_hierarchy(bad)
    bad.write_text(json.dumps({"d": 2, "K": 2, "s": 0.5, "root": [0, 0]}))
    with pytest.raises(HierarchyParseError, match="levels"):
        load_hierarchy(bad)
    bad.write_text(json.dumps({"d": 2, "K": 2, "s": 0.5, "root": [0, 0],
                               "levels": [[[0, 0]], [[1, 0, 0], [0, 1, 0]]]}))
    with pytest.raises(HierarchyValidationError, match=r"levels\[1\]"):
        load_hierarchy(bad)


def test_export_level_csv(cfg0_h6, tmp_path):
    path = tmp_path / "l2.csv"
    export_level_csv(cfg0_h6, 2, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["index", "x0", "x1"] and len(rows) == 10
    assert np.allclose([float(v) for v in rows[4][1:]], cfg0_h6.levels[2][3], atol=0)


def test_duplicate_detection():
    # K = 1 with zero residual piles every level onto the root
    g = ConstantGenerator(np.zeros((2, 1)))
    h = rollout(g, np.zeros(2), s=0.5, L=3)
    groups = duplicate_groups(h)
    assert groups == [[(0, 0), (1, 0), (2, 0), (3, 0)]]
    assert near_duplicates(h, 1e-9) == 0


def test_cells_single_child_is_whole_ball():
    h = rollout(ConstantGenerator(np.array([[0.5], [0.0]])), np.zeros(2), s=0.5, L=3)
    part = voronoi_cells(h, n_samples=2000, rng=make_rng(0))
    for l in range(4):
        assert part.counts(l).tolist() == [2000]


def test_cells_split_line_in_half():
    h = rollout(ConstantGenerator(np.array([[1.0, -1.0]])), np.zeros(1), s=0.5, L=1)
    part = voronoi_cells(h, n_samples=10_000, rng=make_rng(1))
    left = part.members(1, 1).ravel()
    assert left.max() <= 0 and part.members(1, 0).min() >= 0
    assert abs(part.counts(1)[0] / 10_000 - 0.5) < 0.03


def test_cell_ties_go_to_lowest_slot():
    h = rollout(ConstantGenerator(np.array([[1.0, -1.0]])), np.zeros(1), s=0.5, L=1)
    assert route(h, np.array([[0.0]]), 2, 1)[-1].tolist() == [0]


def test_cells_are_nested_and_disjoint(cfg0_h6):
    part = voronoi_cells(cfg0_h6, n_samples=5000, rng=make_rng(2))
    n = len(part.points)
    for l in range(1, 4):
        assert part.counts(l).sum() == n
        # every point's level-l cell is a child of its level-(l-1) cell
        assert np.array_equal(part.assign[l] // 3, part.assign[l - 1])


def test_empty_cells_are_counted(cfg0_h6):
    part = voronoi_cells(cfg0_h6, n_samples=1000, rng=make_rng(3))
    assert part.n_empty() > 0
    assert all(part.counts(l)[idx].sum() == 0 for l, idx in part.empty.items())


def test_cells_reject_bad_arguments(cfg0_h6):
    with pytest.raises(ValueError):
        voronoi_cells(cfg0_h6, p=0.5)
    with pytest.raises(ValueError):
        voronoi_cells(cfg0_h6, n_samples=10)
