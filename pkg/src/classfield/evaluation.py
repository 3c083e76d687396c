"""Level-wise metrics and the experiment harnesses (matched CFG, IFS suites, ablations)."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .generators import (IfsGenerator, NeuralCfgHyper, ifs_family, sample_neural_cfg)
from .hierarchy import AdmissibilityViolation, Hierarchy, rollout
from .learn import METHODS, TrainConfig, canonicalize_children, permute_children, train_method
from .sampling import make_rng

log = logging.getLogger(__name__)


def _kdtree(points: np.ndarray) -> cKDTree:
    # unbalanced, non-compact trees query far faster on the clustered point sets met here
    return cKDTree(points, balanced_tree=False, compact_nodes=False)

NONLINEAR_SUITE = ("nl-sierpinski", "nl-cantor", "nl-koch", "nl-random")
AFFINE_SUITE = ("sierpinski", "cantor", "koch", "random-affine")
METRICS = ("mse", "pi_cd", "dpt")
DPT_EXACT_MAX_NODES = 1500


# --- metrics ------------------------------------------------------------------------

def mse_level(pred: np.ndarray, true: np.ndarray, d: int | None = None) -> float:
    """(1 / (d n)) sum_i ||pred_i - true_i||^2 with rows matched by slot order."""
    pred, true = np.atleast_2d(pred), np.atleast_2d(true)
    if pred.shape != true.shape:
        raise ValueError(f"level shapes differ: {pred.shape} vs {true.shape}")
    d = pred.shape[1] if d is None else d
    return float(((pred - true) ** 2).sum() / (d * len(true)))


def pi_cd(pred: np.ndarray, true: np.ndarray) -> float:
    """Symmetric chamfer distance with squared Euclidean cost."""
    pred, true = np.atleast_2d(pred), np.atleast_2d(true)
    if len(pred) == 0 or len(true) == 0:
        raise ValueError("chamfer distance of an empty set")
    a = _kdtree(true).query(pred)[0]
    b = _kdtree(pred).query(true)[0]
    return float((a * a).mean() + (b * b).mean())


def euclidean_edge_weights(h: Hierarchy, L: int) -> list[np.ndarray]:
    out = [np.zeros(1)]
    for l in range(1, L + 1):
        disp = h.levels[l] - np.repeat(h.levels[l - 1], h.K, axis=0)
        out.append(np.sqrt((disp * disp).sum(1)))
    return out


def root_distances(weights: list[np.ndarray], K: int) -> list[np.ndarray]:
    out = [np.zeros(1)]
    for w in weights[1:]:
        out.append(np.repeat(out[-1], K) + w)
    return out


def weighted_tree_diameter(weights: list[np.ndarray], K: int) -> float:
    """Exact diameter of a complete K-ary tree with nonnegative edge weights."""
    L = len(weights) - 1
    down = np.zeros(K**L)
    best = 0.0
    for l in range(L, 0, -1):
        branch = (weights[l] + down).reshape(-1, K)  # per parent, one entry per child
        top = np.sort(branch, axis=1)
        pair = top[:, -1] + (top[:, -2] if K > 1 else 0.0)
        best = max(best, float(pair.max()))
        down = top[:, -1]
    return best


class _TreeIndex:
    """Flat node ids over levels 0..L with ancestor lookup for LCA distances."""

    def __init__(self, K: int, L: int):
        self.K, self.L = K, L
        self.offsets = np.concatenate([[0], np.cumsum([K**l for l in range(L + 1)])])
        self.n = int(self.offsets[-1])
        self.level = np.repeat(np.arange(L + 1), [K**l for l in range(L + 1)])
        self.local = np.arange(self.n) - self.offsets[self.level]

    def lca_level(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        li, lj = self.level[i], self.level[j]
        m = np.minimum(li, lj)
        c = np.zeros(len(i), dtype=np.int64)
        K = self.K
        for lev in range(1, self.L + 1):
            ok = lev <= m
            ai = self.local[i] // K ** np.maximum(li - lev, 0)
            aj = self.local[j] // K ** np.maximum(lj - lev, 0)
            c += ok & (ai == aj)
        return c

    def distances(self, rd_flat: np.ndarray, rd_levels: list[np.ndarray],
                  i: np.ndarray, j: np.ndarray) -> np.ndarray:
        c = self.lca_level(i, j)
        # flat index of the LCA inside its level
        anc = self.local[i] // self.K ** (self.level[i] - c)
        lca_rd = np.empty(len(i))
        for lev in np.unique(c):
            sel = c == lev
            lca_rd[sel] = rd_levels[lev][anc[sel]]
        return rd_flat[i] + rd_flat[j] - 2 * lca_rd


def lca_distance_matrix(h: Hierarchy, L: int, weights: list[np.ndarray] | None = None) -> np.ndarray:
    """All-pairs weighted tree distances on levels 0..L via the root/LCA formula."""
    weights = euclidean_edge_weights(h, L) if weights is None else weights
    idx = _TreeIndex(h.K, L)
    rd = root_distances(weights, h.K)
    rd_flat = np.concatenate(rd)
    I, J = np.meshgrid(np.arange(idx.n), np.arange(idx.n), indexing="ij")
    return idx.distances(rd_flat, rd, I.ravel(), J.ravel()).reshape(idx.n, idx.n)


def dpt_distortion(pred: Hierarchy, true: Hierarchy, L: int, *,
                   max_exact_nodes: int = DPT_EXACT_MAX_NODES, n_pairs: int = 200_000,
                   rng: np.random.Generator | None = None) -> float:
    """Mean |D_pred - D_true| over unordered node pairs of levels 0..L, over diam(D_true).

    Up to ``max_exact_nodes`` nodes every pair is enumerated; beyond it the mean is
    estimated from ``n_pairs`` uniformly drawn distinct pairs (fixed seed). The
    diameter is always exact.
    """
    if pred.K != true.K or pred.d != true.d:
        raise ValueError("hierarchies differ in topology")
    if L > min(pred.depth, true.depth):
        raise ValueError(f"L={L} exceeds available depth")
    K = true.K
    wt, wp = euclidean_edge_weights(true, L), euclidean_edge_weights(pred, L)
    rt, rp = root_distances(wt, K), root_distances(wp, K)
    ft, fp = np.concatenate(rt), np.concatenate(rp)
    idx = _TreeIndex(K, L)
    diam = weighted_tree_diameter(wt, K)
    if idx.n < 2 or diam == 0:
        return 0.0
    if idx.n <= max_exact_nodes:
        total, count = 0.0, 0
        for start in range(0, idx.n - 1, 256):
            rows = np.arange(start, min(start + 256, idx.n - 1))
            i = np.repeat(rows, idx.n - 1 - rows)
            j = np.concatenate([np.arange(r + 1, idx.n) for r in rows])
            diff = np.abs(idx.distances(fp, rp, i, j) - idx.distances(ft, rt, i, j))
            total += float(diff.sum())
            count += len(i)
        return total / count / diam
    rng = make_rng(4242) if rng is None else rng
    i = rng.integers(0, idx.n, size=n_pairs)
    j = rng.integers(0, idx.n - 1, size=n_pairs)
    j = j + (j >= i)  # distinct pairs, uniform over ordered pairs
    diff = np.abs(idx.distances(fp, rp, i, j) - idx.distances(ft, rt, i, j))
    return float(diff.mean()) / diam


@dataclass
class LevelMetrics:
    level: int
    mse: float
    pi_cd: float
    dpt: float


@dataclass
class TrialResult:
    method: str
    trial: int
    seed: int
    levels: list[LevelMetrics]
    generator: dict = field(default_factory=dict)
    observed_depth: int = 0

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(m, metric) for m in self.levels]))


def evaluate_levels(pred: Hierarchy, true: Hierarchy, levels, dpt: bool = True,
                    max_exact_nodes: int = DPT_EXACT_MAX_NODES) -> list[LevelMetrics]:
    out = []
    for l in levels:
        out.append(LevelMetrics(
            l, mse_level(pred.levels[l], true.levels[l]), pi_cd(pred.levels[l], true.levels[l]),
            dpt_distortion(pred, true, l, max_exact_nodes=max_exact_nodes) if dpt else float("nan")))
    return out


def fit_and_evaluate(true: Hierarchy, L_train: int, L_eval: int, methods, cfg: TrainConfig,
                     trial: int, levels=None, dpt: bool = True, descriptor: dict | None = None
                     ) -> list[TrialResult]:
    """Train each method on the observed prefix only and score its free rollout."""
    observed = true.truncate(L_train)  # nothing deeper reaches the learners
    levels = range(L_train + 1, L_eval + 1) if levels is None else levels
    out = []
    for m in methods:
        g = train_method(m, observed, L_train, cfg)
        pred = rollout(g, observed.root, s=true.s, L=L_eval, lambda_check=None)
        out.append(TrialResult(m, trial, cfg.seed, evaluate_levels(pred, true, levels, dpt),
                               descriptor or {}, observed.depth))
    return out


# --- tables -------------------------------------------------------------------------

def results_csv(rows: list[tuple[str, TrialResult]]) -> str:
    """Long table (trial, method, level, mse, pi_cd, dpt); an optional benchmark column leads."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    with_bench = any(b for b, _ in rows)
    w.writerow((["benchmark"] if with_bench else []) + ["trial", "method", "level", "mse", "pi_cd", "dpt"])
    for bench, r in rows:
        for m in r.levels:
            w.writerow(([bench] if with_bench else []) +
                       [r.trial, r.method, m.level, repr(m.mse), repr(m.pi_cd), repr(m.dpt)])
    return buf.getvalue()


def aggregate_csv(table: list[tuple[str, str, str, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["benchmark", "method", "metric", "mean", "std"])
    for row in table:
        w.writerow(list(row[:3]) + [repr(float(row[3])), repr(float(row[4]))])
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- matched CFG experiment ---------------------------------------------------------

@dataclass(frozen=True)
class MatchedConfig:
    trials: int = 9
    d: int = 2
    K: int = 3
    s: float = 0.5
    L_total: int = 11
    L_train: int = 2
    methods: tuple[str, ...] = METHODS
    hyper: NeuralCfgHyper = NeuralCfgHyper()
    train: TrainConfig = TrainConfig()
    dpt: bool = True
    max_resample: int = 5
    jobs: int = 1
    permute: str | None = None  # None, "permuted" or "canonicalized"


@dataclass
class MatchedResult:
    config: MatchedConfig
    trials: list[TrialResult]
    resampled: list[tuple[int, int, str]]

    def curves(self) -> dict[str, np.ndarray]:
        """method -> (trials, levels) MSE array."""
        out = {}
        for m in self.config.methods:
            rs = sorted((r for r in self.trials if r.method == m), key=lambda r: r.trial)
            out[m] = np.array([[lm.mse for lm in r.levels] for r in rs])
        return out

    def levels(self) -> list[int]:
        return [lm.level for lm in self.trials[0].levels]

    def geometric_summary(self, metric: str = "mse") -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """method -> (geometric mean per level, std of log10 per level) over trials."""
        out = {}
        for m in self.config.methods:
            rs = [r for r in self.trials if r.method == m]
            vals = np.array([[getattr(lm, metric) for lm in r.levels] for r in rs])
            logs = np.log10(vals)
            out[m] = (10 ** logs.mean(0), logs.std(0))
        return out

    def csv(self) -> str:
        return results_csv([("", r) for r in sorted(self.trials, key=lambda r: (r.trial, r.method))])

    def aggregate(self, name: str = "matched-cfg") -> str:
        rows = []
        for metric in ("mse", "pi_cd", "dpt"):
            for m, (gm, sd) in self.geometric_summary(metric).items():
                for lev, a, b in zip(self.levels(), gm, sd):
                    rows.append((f"{name}:L{lev}", m, f"{metric}:geomean", a, b))
        return aggregate_csv(rows)


def sample_ground_truth(cfg: MatchedConfig, trial: int) -> tuple[Hierarchy, dict, list]:
    """Roll out the trial's CFG; an admissibility failure resamples with a shifted seed."""
    resampled = []
    for attempt in range(cfg.max_resample + 1):
        t_eff = trial + 10_000 * attempt
        g = sample_neural_cfg(cfg.d, cfg.K, cfg.hyper, t_eff)
        try:
            h = rollout(g, np.zeros(cfg.d), s=cfg.s, L=cfg.L_total, lambda_check=1.0)
        except AdmissibilityViolation as exc:
            log.warning("trial %d attempt %d rejected: %s", trial, attempt, exc)
            resampled.append((trial, attempt, str(exc)))
            continue
        return h, {"kind": g.kind, "seeds": list(g.seeds)}, resampled
    raise AdmissibilityViolation(f"trial {trial}: no admissible CFG after {cfg.max_resample} resamples")


def _matched_trial(args):
    cfg, trial = args
    h, desc, resampled = sample_ground_truth(cfg, trial)
    if cfg.permute is not None:
        h = permute_children(h, make_rng(5000 + trial))
        if cfg.permute == "canonicalized":
            h = canonicalize_children(h, L_fit=cfg.L_train).hierarchy
    tcfg = replace(cfg.train, seed=cfg.train.seed + trial)
    res = fit_and_evaluate(h, cfg.L_train, cfg.L_total, cfg.methods, tcfg, trial,
                           dpt=cfg.dpt, descriptor=desc)
    return res, resampled


def run_matched_cfg_experiment(cfg: MatchedConfig = MatchedConfig()) -> MatchedResult:
    if cfg.L_train >= cfg.L_total:
        raise ValueError("L_train must be below L_total")
    outs = _map(_matched_trial, [(cfg, t) for t in range(cfg.trials)], cfg.jobs)
    trials = [r for res, _ in outs for r in res]
    resampled = [x for _, rs in outs for x in rs]
    for r in trials:
        assert r.observed_depth == cfg.L_train
    return MatchedResult(cfg, trials, resampled)


# --- IFS benchmarks -------------------------------------------------------------------

@dataclass(frozen=True)
class IfsConfig:
    suite: str = "nonlinear"
    seeds: int = 5
    L_train: int = 2
    L_eval: int = 5
    methods: tuple[str, ...] = METHODS
    train: TrainConfig = TrainConfig()
    jobs: int = 1

    @property
    def benchmarks(self) -> tuple[str, ...]:
        if self.suite == "nonlinear":
            return NONLINEAR_SUITE
        if self.suite == "affine":
            return AFFINE_SUITE
        raise ValueError(f"unknown suite {self.suite!r}")


@dataclass
class BenchmarkResult:
    config: IfsConfig
    rows: list[tuple[str, TrialResult]]

    def per_seed(self, bench: str, method: str, metric: str) -> np.ndarray:
        return np.array([r.mean(metric) for b, r in self.rows if b == bench and r.method == method])

    def table(self) -> list[tuple[str, str, str, float, float]]:
        """Mean and std over seeds of level-averaged values, plus the uniform macro average."""
        out = []
        for metric in METRICS:
            for m in self.config.methods:
                allv = []
                for b in self.config.benchmarks:
                    v = self.per_seed(b, m, metric)
                    allv.append(v)
                    out.append((b, m, metric, float(v.mean()), float(v.std())))
                means = [v.mean() for v in allv]
                out.append(("macro", m, metric, float(np.mean(means)), float(np.concatenate(allv).std())))
        return out

    def lookup(self, bench: str, method: str, metric: str) -> float:
        for b, m, k, mean, _ in self.table():
            if (b, m, k) == (bench, method, metric):
                return mean
        raise KeyError((bench, method, metric))

    def csv(self) -> str:
        return results_csv(self.rows)

    def aggregate(self) -> str:
        return aggregate_csv(self.table())

    def report(self) -> str:
        """Human-readable table in units of 1e-3."""
        lines = []
        benches = list(self.config.benchmarks) + ["macro"]
        for metric in METRICS:
            lines.append(f"[{metric}] (x 1e-3)")
            lines.append("method".ljust(10) + "".join(b.rjust(22) for b in benches))
            tab = {(b, m, k): (mu, sd) for b, m, k, mu, sd in self.table()}
            for m in self.config.methods:
                cells = [f"{tab[(b, m, metric)][0] * 1e3:.2f} +- {tab[(b, m, metric)][1] * 1e3:.2f}"
                         for b in benches]
                lines.append(m.ljust(10) + "".join(c.rjust(22) for c in cells))
            lines.append("")
        return "\n".join(lines)


def _ifs_task(args):
    cfg, bench, seed = args
    fam = ifs_family(bench, trial=seed)
    true = rollout(IfsGenerator(fam), fam.root, s=1.0, L=cfg.L_eval)
    tcfg = replace(cfg.train, seed=cfg.train.seed + seed)
    res = fit_and_evaluate(true, cfg.L_train, cfg.L_eval, cfg.methods, tcfg, seed,
                           descriptor={"family": bench, "fixed": fam.fixed})
    return [(bench, r) for r in res]


def run_ifs_benchmark(cfg: IfsConfig = IfsConfig()) -> BenchmarkResult:
    tasks = [(cfg, b, seed) for b in cfg.benchmarks for seed in range(cfg.seeds)]
    rows = [x for out in _map(_ifs_task, tasks, cfg.jobs) for x in out]
    return BenchmarkResult(cfg, rows)


# --- ablations ----------------------------------------------------------------------

@dataclass
class AblationTable:
    name: str
    rows: list[tuple[str, str, int, float, float]]  # (setting, method, level, value, log10 std)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "method", "level", "value", "log10_std"])
        for row in self.rows:
            w.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4]))])
        return buf.getvalue()

    def level_mean(self, setting: str, method: str) -> float:
        """Geometric mean over held-out levels of the per-level geometric means."""
        v = [r[3] for r in self.rows if r[0] == setting and r[1] == method]
        return float(10 ** np.mean(np.log10(v)))


def _summary_rows(res: MatchedResult, setting: str, normalizer=None):
    rows = []
    for m in res.config.methods:
        rs = sorted((r for r in res.trials if r.method == m), key=lambda r: r.trial)
        vals = np.array([[lm.mse for lm in r.levels] for r in rs])
        if normalizer is not None:
            vals = vals / normalizer
        logs = np.log10(vals)
        for lev, a, b in zip(res.levels(), 10 ** logs.mean(0), logs.std(0)):
            rows.append((setting, m, lev, float(a), float(b)))
    return rows


def level_spread(cfg: MatchedConfig, L_total: int) -> np.ndarray:
    """(trials, L_total - L_train) array of mean ||x_i - x0||^2 on each held-out level."""
    out = []
    for t in range(cfg.trials):
        h, _, _ = sample_ground_truth(cfg, t)
        out.append([float(((h.levels[l] - h.root) ** 2).sum(1).mean())
                    for l in range(cfg.L_train + 1, L_total + 1)])
    return np.array(out)


def run_ablations(which: str, base: MatchedConfig | None = None) -> AblationTable:
    base = MatchedConfig(methods=("cfp", "avg"), dpt=False) if base is None else base
    rows = []
    if which == "depth":
        for Lt in (1, 2, 3):
            res = run_matched_cfg_experiment(replace(base, L_train=Lt))
            rows += _summary_rows(res, f"L_train={Lt}")
    elif which == "scale":
        for s in (0.3, 0.5, 0.7, 0.85):
            cfg = replace(base, s=s)
            res = run_matched_cfg_experiment(cfg)
            rows += _summary_rows(res, f"s={s}", level_spread(cfg, cfg.L_total))
    elif which == "ordering":
        for variant in (None, "permuted", "canonicalized"):
            res = run_matched_cfg_experiment(replace(base, permute=variant))
            rows += _summary_rows(res, variant or "original")
    else:
        raise ValueError(f"unknown ablation {which!r}")
    return AblationTable(which, rows)


def config_dict(cfg) -> dict:
    return asdict(cfg)
