"""End-to-end acceptance checks; each prints one PASS/FAIL line to the terminal."""
import math
import time

import numpy as np
import pytest

from classfield.evaluation import IfsConfig, MatchedConfig, run_ifs_benchmark, run_matched_cfg_experiment
from classfield.generators import (NeuralCfgHyper, check_cfg_axioms, contractivity_certificate,
                                   ifs_family, lipschitz_probe, sample_neural_cfg)
from classfield.hierarchy import index_to_address, rollout, voronoi_cells
from classfield.learn import AffineModel, ConstModel, PrefixDataset, init_mlp, prefix_loss
from classfield.metric import (MetricView, cell_weights, depth_for_accuracy, intra_level_separation,
                               plan_truncation, sampling_radius, separation_recursion_bound,
                               tree_diameter, tree_distance, truncation_gap)
from classfield.sampling import (ReferencePacking, haar_sample, make_rng, min_pairwise_distance,
                                 pair_separation_bound, reference_packing)

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def _template_sep(g):
    return g.sigma_min * min_pairwise_distance(g.C.T)


def test_criterion_01_truncation_bound(report):
    t0 = time.perf_counter()
    worst, rows = -np.inf, []
    for trial in range(5):
        g = sample_neural_cfg(2, 3, NeuralCfgHyper(), trial)
        h = rollout(g, np.zeros(2), s=0.5, L=9)
        part = voronoi_cells(h, 2, 200_000, g.lambda_max, make_rng(trial), depth=9)
        W = cell_weights(part, 0.5, 9)
        tau = sampling_radius(part)
        for L in (2, 3, 4, 5):
            rep = truncation_gap(h, L, lambda_max=g.lambda_max, partition=part, weights=W,
                                 L_ref=L + 4, tau_samp=tau)
            rows.append(rep.ok)
            worst = max(worst, rep.gap - rep.bound - rep.slack)
    elapsed = time.perf_counter() - t0
    ok = all(rows) and elapsed < 300
    report(1, ok, f"{sum(rows)}/{len(rows)} gaps within bound + 2 tau "
                  f"(max excess {worst:.3g}), {elapsed:.0f}s")


def test_criterion_02_tree_closed_form(report):
    rng = make_rng(2)
    h = rollout(sample_neural_cfg(2, 3, NeuralCfgHyper(), 0), np.zeros(2), s=0.5, L=6)
    view = MetricView(h, "tree", 6)
    worst = 0.0
    for _ in range(1000):
        la, lb = rng.integers(0, 7, 2)
        a = index_to_address(int(la), int(rng.integers(0, 3**la)), 3)
        b = index_to_address(int(lb), int(rng.integers(0, 3**lb)), 3)
        worst = max(worst, abs(view.shortest_path_distance(a, b) - tree_distance(a, b, 0.5)))
    diam_ok = all(MetricView(h, "tree", L).diameter() == pytest.approx(tree_diameter(0.5, L), abs=1e-12)
                  for L in range(1, 7))
    report(2, worst <= 1e-12 and diam_ok, f"max |Dijkstra - closed form| = {worst:.2e}, "
                                          f"diameters exact: {diam_ok}")


def test_criterion_03_cfg_axioms(report):
    bad = []
    for trial in range(9):
        g = sample_neural_cfg(2, 3, NeuralCfgHyper(), trial)
        probes = haar_sample(2, make_rng(300 + trial), size=1000)
        rep = check_cfg_axioms(g, probes, _template_sep(g), g.sigma_min * g.packing.lambda_minus,
                               g.lambda_max)
        bad.append(len(rep.violations))
    report(3, sum(bad) == 0, f"violations per trial {bad}")


def test_criterion_04_contractivity(report):
    fixed = {n: contractivity_certificate(ifs_family(n)).max()
             for n in ("nl-sierpinski", "nl-cantor", "nl-koch")}
    rand = max(contractivity_certificate(ifs_family("nl-random", t)).max() for t in range(100))
    ok = fixed["nl-sierpinski"] < 0.95 and fixed["nl-cantor"] < 0.80 and fixed["nl-koch"] < 0.80 \
        and rand < 0.81
    report(4, ok, ", ".join(f"{k} {v:.3f}" for k, v in fixed.items()) + f", nl-random max {rand:.3f}")


@pytest.fixture(scope="module")
def nonlinear_bench():
    t0 = time.perf_counter()
    res = run_ifs_benchmark(IfsConfig(suite="nonlinear", seeds=5))
    return res, time.perf_counter() - t0


def test_criterion_05_ifs_benchmark(report, nonlinear_bench):
    res, elapsed = nonlinear_bench
    order_ok, parts = True, []
    for metric in ("mse", "pi_cd", "dpt"):
        cfp = res.lookup("macro", "cfp", metric)
        rest = min(res.lookup("macro", m, metric) for m in ("affine", "const", "avg"))
        order_ok &= cfp < rest
        parts.append(f"{metric} cfp {cfp * 1e3:.2f} vs best baseline {rest * 1e3:.2f}")
    ref = {"nl-sierpinski": 75.97, "nl-cantor": 270.62, "nl-koch": 62.93}
    rel = max(abs(res.lookup(b, m, "mse") * 1e3 - v) / v for b, v in ref.items() for m in ("const", "avg"))
    ok = order_ok and rel <= 0.2 and elapsed < 1200
    report(5, ok, "; ".join(parts) + f" (x1e-3); baseline rel. error {rel:.4f}; {elapsed:.0f}s")


def test_criterion_06_matched_cfg(report):
    t0 = time.perf_counter()
    res = run_matched_cfg_experiment(MatchedConfig(dpt=False))
    elapsed = time.perf_counter() - t0
    curves = res.curves()
    beat_avg = int(np.sum(np.all(curves["cfp"] < curves["avg"], axis=1)))
    beat_aff = int(np.sum(np.all(curves["cfp"] < curves["affine"], axis=1)))
    ok = beat_avg >= 8 and beat_aff >= 7 and elapsed < 1800
    report(6, ok, f"cfp below avg at every level in {beat_avg}/9 trials, below affine in "
                  f"{beat_aff}/9; resampled {len(res.resampled)}; {elapsed:.0f}s")


def _numeric(model, data, p, h=1e-5):
    g = np.zeros_like(p)
    flat, gf = p.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = prefix_loss(model, data, with_grad=False)
        flat[i] = old - h
        dn = prefix_loss(model, data, with_grad=False)
        flat[i] = old
        gf[i] = (up - dn) / (2 * h)
    return g


def test_criterion_07_gradient_checks(report):
    rng = make_rng(7)
    arches = {
        "mlp-relu": lambda: init_mlp(2, 3, hidden=8, depth=4, activation="relu", rng=rng),
        "mlp-gelu": lambda: init_mlp(2, 3, hidden=8, depth=4, activation="gelu", rng=rng),
        "single-layer": lambda: init_mlp(2, 3, depth=1, rng=rng),
        "affine": lambda: AffineModel(rng.standard_normal((3, 2, 2)), rng.standard_normal((2, 3))),
        "const": lambda: ConstModel(rng.standard_normal((2, 3))),
    }
    worst = {}
    for name, make in arches.items():
        model, w = make(), 0.0
        for _ in range(20):
            while True:
                data = PrefixDataset(rng.standard_normal((6, 2)), rng.standard_normal((6, 2, 3)),
                                     rng.uniform(0.1, 1.0, 6), np.zeros(6, dtype=int))
                if not hasattr(model, "min_abs_preactivation") or model.activation != "relu" \
                        or model.min_abs_preactivation(data.X) >= 1e-6:
                    break
            _, grads = prefix_loss(model, data)
            for p, g in zip(model.params, grads):
                num = _numeric(model, data, p)
                w = max(w, float(np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)))
        worst[name] = w
    report(7, max(worst.values()) <= 1e-4,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (max rel. error over 20 points)")


def test_criterion_08_separation_recursion(report):
    fails, checks, margins = 0, 0, []
    for trial in range(9):
        g = sample_neural_cfg(2, 3, NeuralCfgHyper(), trial)
        h = rollout(g, np.zeros(2), s=0.5, L=6)
        L_r = lipschitz_probe(g, 20_000, make_rng(800 + trial), points=h.all_nodes(5))
        delta = [None] + [intra_level_separation(h, l) for l in range(1, 7)]
        for l in range(1, 6):
            lower = separation_recursion_bound(delta[l], l, 0.5, _template_sep(g), g.lambda_max, L_r)
            checks += 1
            fails += delta[l + 1] < lower - 1e-12
            margins.append(delta[l + 1] - lower)
    report(8, fails == 0, f"{checks - fails}/{checks} level steps satisfy the recursion "
                          f"(min slack {min(margins):.3g})")


def test_criterion_09_sampling_probabilities(report):
    d, m, eps, n = 4, 3, 0.1, 10_000
    rng = make_rng(9)
    hits = sum(min_pairwise_distance(haar_sample(d, rng, m)) >= eps for _ in range(n))
    bound = pair_separation_bound(d, m, eps)
    sigma = math.sqrt(bound * (1 - bound) / n)
    freq_ok = hits / n >= bound - 3 * sigma
    bad = 0
    for seed in range(200):
        d2, K = 2 + seed % 4, 1 + seed % 5
        P = reference_packing(d2, K, 0.3, make_rng(seed))
        norms = np.linalg.norm(P.columns, axis=0)
        bad += not (np.all(np.abs(norms - 1) < 1e-12)
                    and (K == 1 or min_pairwise_distance(P.columns.T) >= P.epsilon)
                    and isinstance(ReferencePacking.from_json(P.to_json()), ReferencePacking))
    report(9, freq_ok and bad == 0, f"frequency {hits / n:.4f} vs bound {bound:.5f} - 3 sigma; "
                                    f"{200 - bad}/200 packings valid")


def test_criterion_10_planner(report):
    L_eps = depth_for_accuracy(0.1, 0.5, 1.0)
    gamma = plan_truncation(0.1, 0.5, 1.0, 3).gamma
    L_r = 13.0
    s_star = (-1 + math.sqrt(1 + 4 * L_r)) / (2 * L_r)
    # an even grid never lands exactly on the root s*
    grid = np.linspace(0.5 * s_star, 1.5 * s_star, 20)
    flips = []
    for s in grid:
        rep = plan_truncation(0.1, float(s), 1.0, 3, lipschitz=L_r, sep=10.0)
        margin = 1 - s - s**2 * L_r
        feasible = margin > 0 and 2 * s / margin <= 10.0
        flips.append(rep.margin_positive == (margin > 0) and rep.separation_feasible == feasible)
    margins = 1 - grid - grid**2 * L_r
    both = bool(np.any(margins > 0) and np.any(margins <= 0))
    ok = L_eps == 6 and abs(gamma - math.log(3) / math.log(2)) <= 1e-12 and all(flips) and both
    report(10, ok, f"L_eps={L_eps}, gamma={gamma:.12f}, flags correct on {sum(flips)}/{len(grid)} "
                   f"scales around s*={s_star:.4f}")
