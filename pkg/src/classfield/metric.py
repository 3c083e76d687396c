"""Edge-weight schemes, path metrics on truncations, Hausdorff machinery and bound checks."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .hierarchy import (CellPartition, CellSample, Hierarchy, address_to_index,
                        common_prefix_length, duplicate_groups, index_to_address,
                        pnorm, route, uniform_lp_ball, voronoi_cells)
from .sampling import make_rng

ALL_PAIRS_MAX_NODES = 1500


def _kdtree(points: np.ndarray) -> cKDTree:
    # unbalanced, non-compact trees query far faster on the clustered point sets met here
    return cKDTree(points, balanced_tree=False, compact_nodes=False)


class EmptyCellError(ValueError):
    pass


# --- closed forms ----------------------------------------------------------------

def tree_distance(alpha: Sequence[int], beta: Sequence[int], s: float) -> float:
    """(2 s^(c+1) - s^(m+1) - s^(n+1)) / (1 - s), c = longest common prefix length."""
    if not 0 < s < 1:
        raise ValueError(f"scale must lie in (0, 1), got {s}")
    c = common_prefix_length(alpha, beta)
    m, n = len(alpha), len(beta)
    return (2 * s ** (c + 1) - s ** (m + 1) - s ** (n + 1)) / (1 - s)


def tree_diameter(s: float, L: int) -> float:
    return 2 * s * (1 - s**L) / (1 - s)


def kappa_p2(d: int, p: float) -> float:
    """sup ||z||_p / ||z||_2 = d^max(1/p - 1/2, 0)."""
    inv = 0.0 if np.isinf(p) else 1.0 / p
    return d ** max(inv - 0.5, 0.0)


# --- Hausdorff -------------------------------------------------------------------

def _as_points(A) -> np.ndarray:
    pts = A.member_points if isinstance(A, CellSample) else A
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


def directed_hausdorff(P: np.ndarray, Q: np.ndarray, p: float = 2) -> float:
    """sup_{a in P} inf_{b in Q} ||a - b||_p."""
    if len(P) * len(Q) <= 250_000:
        return float(pnorm(P[:, None, :] - Q[None, :, :], p).min(axis=1).max())
    dist, _ = _kdtree(Q).query(P, p=p)
    return float(dist.max())


def hausdorff_distance(A, B, p: float = 2) -> float:
    """Hausdorff distance between two finite point sets (or sampled cells)."""
    P, Q = _as_points(A), _as_points(B)
    if len(P) == 0 or len(Q) == 0:
        raise EmptyCellError("Hausdorff distance of an empty sample")
    return max(directed_hausdorff(P, Q, p), directed_hausdorff(Q, P, p))


def cell_edge_weight(parent, child, level: int, s: float, lambda_max: float, p: float = 2) -> float:
    """s^|alpha| * lambda_max * d_H(C_alpha, C_alpha k); ``level`` is |alpha|."""
    return s**level * lambda_max * hausdorff_distance(parent, child, p)


def _support(part: CellPartition, level: int, idx: int) -> np.ndarray:
    # an unsampled cell is represented by its centre
    pts = part.members(level, idx)
    return pts if len(pts) else part.hierarchy.levels[level][idx][None, :]


def cell_weights(part: CellPartition, s: float, upto: int | None = None) -> list[np.ndarray]:
    """Weights of every edge into levels 1..upto; entry [l][i] is the edge into node (l, i)."""
    h, K, p = part.hierarchy, part.hierarchy.K, part.p
    upto = part.depth if upto is None else upto
    out = [np.zeros(1)]
    for l in range(upto):
        w = np.empty(K ** (l + 1))
        for par in range(K**l):
            P = _support(part, l, par)
            tree_p = _kdtree(P) if len(P) > 500 else None
            for k in range(K):
                Q = _support(part, l + 1, par * K + k)
                if tree_p is not None and len(Q) * len(P) > 250_000:
                    fwd = float(_kdtree(Q).query(P, p=p)[0].max())
                    back = float(tree_p.query(Q, p=p)[0].max())
                    dh = max(fwd, back)
                else:
                    dh = hausdorff_distance(P, Q, p)
                w[par * K + k] = s**l * part.lambda_max * dh
        out.append(w)
    return out


# --- metric views -----------------------------------------------------------------

SCHEMES = ("tree", "pt", "cell")


class MetricView:
    """Undirected weighted tree (or exact-duplicate quotient) over a truncation.

    ``weights[l][i]`` is the weight of the edge joining node (l, i) to its parent.
    """

    def __init__(self, h: Hierarchy, scheme: str, L: int | None = None, *,
                 p: float = 2, generator=None, partition: CellPartition | None = None,
                 weights: list[np.ndarray] | None = None, merge_duplicates: bool = True):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.h, self.scheme, self.p = h, scheme, p
        self.L = h.depth if L is None else L
        self.K, self.s = h.K, h.s
        if weights is None:
            weights = self._compute_weights(generator, partition)
        self.weights = [np.asarray(w, dtype=float) for w in weights[:self.L + 1]]
        self.offsets = np.concatenate([[0], np.cumsum([self.K**l for l in range(self.L + 1)])])
        self.n_nodes = int(self.offsets[-1])
        self.rep = np.arange(self.n_nodes)
        if merge_duplicates and scheme != "tree":
            for group in duplicate_groups(h, self.L):
                ids = [self.node_id(l, i) for l, i in group]
                self.rep[ids] = min(ids)
        self._graph = self._build_graph()
        self._cache: dict[int, np.ndarray] = {}

    def _compute_weights(self, generator, partition):
        h, s, K = self.h, self.s, self.K
        if self.scheme == "tree":
            return [np.zeros(1)] + [np.full(K**l, s**l) for l in range(1, self.L + 1)]
        if self.scheme == "pt":
            out = [np.zeros(1)]
            for l in range(1, self.L + 1):
                if generator is not None:
                    R = generator(h.levels[l - 1])  # (n, d, K)
                    disp = s**l * R.transpose(0, 2, 1).reshape(-1, h.d)
                else:
                    disp = h.levels[l] - np.repeat(h.levels[l - 1], K, axis=0)
                out.append(pnorm(disp, self.p))
            return out
        if partition is None:
            raise ValueError("cell scheme needs a CellPartition")
        return cell_weights(partition, s, self.L)

    def node_id(self, level: int, idx: int) -> int:
        return int(self.offsets[level] + idx)

    def address_id(self, alpha: Sequence[int]) -> int:
        level, idx = address_to_index(alpha, self.K)
        if level > self.L:
            raise IndexError(f"address of level {level} beyond truncation depth {self.L}")
        return self.node_id(level, idx)

    def _build_graph(self):
        rows, cols, vals = [], [], []
        for l in range(1, self.L + 1):
            child = self.offsets[l] + np.arange(self.K**l)
            parent = self.offsets[l - 1] + np.arange(self.K**l) // self.K
            rows.append(self.rep[child])
            cols.append(self.rep[parent])
            vals.append(self.weights[l])
        if not rows:
            return coo_matrix((self.n_nodes, self.n_nodes)).tocsr()
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        keep = r != c
        r, c, v = r[keep], c[keep], v[keep]
        # csgraph treats explicit zeros as missing edges; a zero-weight edge becomes tiny
        v = np.where(v > 0, v, 1e-300)
        g = coo_matrix((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                       shape=(self.n_nodes, self.n_nodes)).tocsr()
        return g

    def distances_from(self, node: int) -> np.ndarray:
        src = int(self.rep[node])
        if src not in self._cache:
            self._cache[src] = dijkstra(self._graph, directed=False, indices=src)
        return self._cache[src][self.rep]

    def shortest_path_distance(self, u: Sequence[int], v: Sequence[int]) -> float:
        a, b = self.address_id(u), self.address_id(v)
        if self.rep[a] == self.rep[b]:
            return 0.0
        return float(self.distances_from(a)[b])

    def all_pairs(self) -> np.ndarray:
        if self.n_nodes > ALL_PAIRS_MAX_NODES:
            raise MemoryError(f"{self.n_nodes} nodes exceeds the all-pairs limit {ALL_PAIRS_MAX_NODES}")
        D = dijkstra(self._graph, directed=False)
        return D[np.ix_(self.rep, self.rep)]

    def root_distances(self) -> list[np.ndarray]:
        """Path length from the root along ancestral chains (tree structure)."""
        out = [np.zeros(1)]
        for l in range(1, self.L + 1):
            out.append(np.repeat(out[-1], self.K) + self.weights[l])
        return out

    def diameter(self) -> float:
        if self.n_nodes <= ALL_PAIRS_MAX_NODES:
            return float(self.all_pairs().max())
        # double sweep is exact on trees with positive weights
        d0 = self.distances_from(0)
        far = int(np.argmax(d0))
        return float(self.distances_from(far).max())

    def dump_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "scheme", "weight"])
            for l in range(1, self.L + 1):
                for i, wt in enumerate(self.weights[l]):
                    addr = "".join(map(str, index_to_address(l, i, self.K)))
                    w.writerow([addr, self.scheme, repr(float(wt))])
        tmp.replace(path)


# --- separation ---------------------------------------------------------------------

def min_distinct_distance(X: np.ndarray, brute_max: int = 10_000) -> float:
    """Minimum distance between distinct rows of X."""
    X = np.unique(np.asarray(X, dtype=float), axis=0)
    if len(X) < 2:
        raise ValueError("separation undefined for fewer than two distinct points")
    if len(X) > brute_max:
        dist, _ = _kdtree(X).query(X, k=2)
        return float(dist[:, 1].min())
    best = np.inf
    for i in range(0, len(X), 1000):
        block = X[i:i + 1000]
        D = np.sqrt(((block[:, None, :] - X[None, :, :]) ** 2).sum(-1))
        rows = np.arange(len(block))
        D[rows, rows + i] = np.inf
        best = min(best, float(D.min()))
    return best


def intra_level_separation(h: Hierarchy, l: int, brute_max: int = 10_000) -> float:
    if l > h.depth:
        raise ValueError(f"level {l} beyond depth {h.depth}")
    return min_distinct_distance(h.levels[l], brute_max)


def separation_recursion_bound(delta_l: float, l: int, s: float, s_sep: float,
                               lambda_max: float, L_r: float) -> float:
    """Lower bound on delta_(l+1) given delta_l."""
    a = s ** (l + 1)
    return max(0.0, min(a * s_sep, (1 - a * L_r) * delta_l - 2 * a * lambda_max))


# --- truncation and diameter bounds -------------------------------------------------

def sampling_radius(part: CellPartition, n_probes: int = 20_000,
                    rng: np.random.Generator | None = None) -> float:
    """Covering radius of the cell sample over the root ball, estimated by probing."""
    rng = make_rng(12345) if rng is None else rng
    probes = uniform_lp_ball(n_probes, part.hierarchy.root, part.lambda_max, part.p, rng)
    dist, _ = _kdtree(part.points).query(probes, p=part.p)
    return float(dist.max())


@dataclass
class TruncationGapReport:
    L: int
    L_ref: int
    gap: float
    bound: float
    tau_samp: float
    n_empty_cells: int

    @property
    def slack(self) -> float:
        return 2 * self.tau_samp

    @property
    def ok(self) -> bool:
        return self.gap <= self.bound + self.slack


def truncation_gap(h_deep: Hierarchy, L: int, *, p: float = 2, lambda_max: float = 1.0,
                   partition: CellPartition | None = None, weights: list[np.ndarray] | None = None,
                   L_ref: int | None = None, n_samples: int = 200_000,
                   rng: np.random.Generator | None = None, tau_samp: float | None = None
                   ) -> TruncationGapReport:
    """sup over nodes below level L (down to L_ref) of their d_cell distance to Y_L.

    In a tree the nearest truncation node is the level-L ancestor, so the gap is
    the largest ancestral chain sum of cell weights.
    """
    L_ref = h_deep.depth if L_ref is None else L_ref
    if L > L_ref or L_ref > h_deep.depth:
        raise ValueError(f"invalid truncation L={L} for reference depth {L_ref}")
    s, K = h_deep.s, h_deep.K
    if weights is None:
        if partition is None:
            partition = voronoi_cells(h_deep, p, n_samples, lambda_max, rng, depth=L_ref)
        weights = cell_weights(partition, s, L_ref)
    if tau_samp is None:
        tau_samp = sampling_radius(partition) if partition is not None else 0.0
    gap = 0.0
    acc = np.zeros(K**L)  # chain sums from the level-L ancestor
    for l in range(L + 1, L_ref + 1):
        acc = np.repeat(acc, K) + weights[l]
        gap = max(gap, float(acc.max()))
    bound = 2 * lambda_max**2 * s**L / (1 - s)
    n_empty = partition.n_empty() if partition is not None else 0
    return TruncationGapReport(L, L_ref, gap, bound, tau_samp, n_empty)


@dataclass
class DiameterReport:
    L: int
    diam_tree: float
    diam_tree_closed_form: float
    diam_pt: float
    diam_pt_bound: float
    diam_cell: float
    diam_cell_bound: float
    gh_lower_pt: float    # 1/2 |diam T_L - diam P_L|
    gh_lower_cell: float  # 1/2 |diam T_L - diam C_L|
    lemma_lower_pt: float
    lemma_lower_cell: float
    slack: float = 0.0

    @property
    def ok(self) -> bool:
        return (abs(self.diam_tree - self.diam_tree_closed_form) <= 1e-12
                and self.diam_pt <= self.diam_pt_bound + 1e-12
                and self.diam_cell <= self.diam_cell_bound + self.slack + 1e-12
                and self.gh_lower_pt >= self.lemma_lower_pt - 1e-12
                and self.gh_lower_cell >= self.lemma_lower_cell - 1e-12)


def diameter(view: MetricView) -> float:
    return view.diameter()


def diameter_bounds_check(h: Hierarchy, L: int, s: float, lambda_max: float, p: float = 2, *,
                          partition: CellPartition | None = None, generator=None,
                          n_samples: int = 200_000, rng=None, slack: float = 0.0) -> DiameterReport:
    if L < 1:
        raise ValueError("need L >= 1")
    if partition is None:
        partition = voronoi_cells(h, p, n_samples, lambda_max, rng, depth=L)
    kappa = kappa_p2(h.d, p)
    dt = MetricView(h, "tree", L).diameter()
    dp = MetricView(h, "pt", L, p=p, generator=generator).diameter()
    dc = MetricView(h, "cell", L, p=p, partition=partition).diameter()
    closed = tree_diameter(s, L)
    geo = s * (1 - s**L) / (1 - s)
    return DiameterReport(
        L, dt, closed, dp, kappa * lambda_max * closed, dc, 2 * lambda_max**2 / s * closed,
        0.5 * abs(dt - dp), 0.5 * abs(dt - dc),
        max(0.0, (1 - kappa * lambda_max) * geo), max(0.0, (1 - 2 * lambda_max**2 / s) * geo),
        slack)


@dataclass
class DominationReport:
    n_pairs: int
    cell_violations: int
    pt_violations: int
    worst_cell_ratio: float
    worst_pt_ratio: float

    @property
    def ok(self) -> bool:
        return self.cell_violations == 0 and self.pt_violations == 0


def domination_check(h: Hierarchy, L: int, s: float, lambda_max: float, p: float = 2, *,
                     cell_view: MetricView | None = None, pt_view: MetricView | None = None,
                     partition: CellPartition | None = None, generator=None,
                     n_pairs: int | None = None, rng=None, slack: float = 0.0) -> DominationReport:
    """d_cell <= (2 lambda^2 / s) d_tree + slack and d_pt <= kappa lambda d_tree."""
    if L < 1:
        raise ValueError("need L >= 1")
    rng = make_rng(0) if rng is None else rng
    if cell_view is None:
        if partition is None:
            partition = voronoi_cells(h, p, 200_000, lambda_max, rng, depth=L)
        cell_view = MetricView(h, "cell", L, p=p, partition=partition)
    if pt_view is None:
        pt_view = MetricView(h, "pt", L, p=p, generator=generator)
    n = cell_view.n_nodes
    if n_pairs is None and n <= ALL_PAIRS_MAX_NODES:
        iu = np.triu_indices(n, 1)
        Dc, Dp = cell_view.all_pairs()[iu], pt_view.all_pairs()[iu]
        ids = np.stack(iu, 1)
    else:
        m = n_pairs or 10_000
        ids = rng.integers(0, n, size=(m, 2))
        Dc = np.array([cell_view.distances_from(a)[b] for a, b in ids])
        Dp = np.array([pt_view.distances_from(a)[b] for a, b in ids])
    levels = np.searchsorted(cell_view.offsets, ids, side="right") - 1
    addrs_a = [index_to_address(l, i - cell_view.offsets[l], h.K) for l, i in zip(levels[:, 0], ids[:, 0])]
    addrs_b = [index_to_address(l, i - cell_view.offsets[l], h.K) for l, i in zip(levels[:, 1], ids[:, 1])]
    Dt = np.array([tree_distance(a, b, s) for a, b in zip(addrs_a, addrs_b)])
    c_cell = 2 * lambda_max**2 / s
    c_pt = kappa_p2(h.d, p) * lambda_max
    bad_c = Dc > c_cell * Dt + slack + 1e-12
    bad_p = Dp > c_pt * Dt + 1e-12
    pos = Dt > 0
    wc = float((Dc[pos] / Dt[pos]).max()) if pos.any() else 0.0
    wp = float((Dp[pos] / Dt[pos]).max()) if pos.any() else 0.0
    return DominationReport(len(Dt), int(bad_c.sum()), int(bad_p.sum()), wc, wp)


def sibling_hausdorff_check(part: CellPartition, level: int, n_probes: int = 50_000,
                            rng=None) -> list[tuple[int, int, float, float, float]]:
    """Check d_H(C_n, C_m) >= ||x_n - x_m|| / 2 - tau_n for sibling cells at ``level``.

    tau_n is the covering radius of C_n by its samples, probed with uniform
    points routed to C_n plus the centre x_n itself. Only cells containing their
    own centre are checked. Returns (n, m, d_H, lower_bound, tau_n) per pair.
    """
    h, K, p = part.hierarchy, part.hierarchy.K, part.p
    rng = make_rng(777) if rng is None else rng
    probes = uniform_lp_ball(n_probes, h.root, part.lambda_max, p, rng)
    probe_cell = route(h, probes, p, level)[-1]
    own = part.centres_in_own_cells(level)
    counts = part.counts(level)
    out = []
    for par in range(K ** (level - 1)):
        kids = [par * K + k for k in range(K) if counts[par * K + k] > 0 and own[par * K + k]]
        taus = {}
        for n in kids:
            pts = part.members(level, n)
            probe_pts = np.vstack([probes[probe_cell == n], h.levels[level][n][None, :]])
            taus[n] = float(_kdtree(pts).query(probe_pts, p=p)[0].max())
        for i, n in enumerate(kids):
            for m in kids[i + 1:]:
                dh = hausdorff_distance(part.members(level, n), part.members(level, m), p)
                rho = float(pnorm(h.levels[level][n] - h.levels[level][m], p))
                tau = min(taus[n], taus[m])
                out.append((n, m, dh, 0.5 * rho - tau, tau))
    return out


# --- complexity planner --------------------------------------------------------------

@dataclass
class PlannerReport:
    eps: float
    s: float
    lambda_max: float
    K: int
    L_eps: int
    gamma: float
    L_minus: int
    L_plus: int
    M: int
    B: float | None
    delta: float | None
    width_order: float
    depth_order: float | None
    memorization_width: int | None
    c_sep: float | None
    margin_positive: bool | None
    separation_feasible: bool | None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def depth_for_accuracy(eps: float, s: float, lambda_max: float) -> int:
    """L_eps = max{2, ceil(log(2 lambda^2 / ((1-s) eps)) / (-log s))}."""
    val = math.log(2 * lambda_max**2 / ((1 - s) * eps)) / (-math.log(s))
    return max(2, math.ceil(val))


def plan_truncation(eps: float, s: float, lambda_max: float, K: int, L_minus: int = 0,
                    L_plus: int | None = None, delta: float | None = None, *,
                    lipschitz: float | None = None, sep: float | None = None,
                    d: int | None = None) -> PlannerReport:
    """Depth, window size and single-level feasibility for an eps-accurate rollout.

    ``lipschitz`` is L_r, ``sep`` is sigma_min * eps_packing and ``lambda_max``
    doubles as the residual bound c_bd.
    """
    if not 0 < s < 1:
        raise ValueError(f"scale must lie in (0, 1), got {s}")
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if K <= 1:
        raise ValueError("need K > 1")
    L_eps = depth_for_accuracy(eps, s, lambda_max)
    L_plus = L_eps if L_plus is None else L_plus
    if not 0 <= L_minus < L_plus:
        raise ValueError("need 0 <= L_minus < L_plus")
    gamma = math.log(K) / (-math.log(s))
    M = sum(K**l for l in range(L_minus, L_plus))
    B = None
    depth_order = None
    if delta is not None:
        B = 2 * lambda_max * s * (1 - s ** (L_plus - 1)) / ((1 - s) * delta)
        lk = L_plus * math.log(K)
        depth_order = K ** (1.5 * L_plus) * math.sqrt(lk) * (1 + max(math.log(B), 0.0) / lk)
    mem_width = d * (M - 1) + max(d * K, 12) if d is not None else None
    c_sep = margin = feasible = None
    notes = []
    if lipschitz is not None:
        margin_val = 1 - s - s**2 * lipschitz
        margin = margin_val > 0
        if margin:
            c_sep = 2 * lambda_max * s / margin_val
            feasible = sep is not None and c_sep <= sep
        else:
            feasible = False
            notes.append("1 - s - s^2 L_r <= 0: single-level separation argument unavailable")
    return PlannerReport(eps, s, lambda_max, K, L_eps, gamma, L_minus, L_plus, M, B, delta,
                         float(K**L_plus), depth_order, mem_width, c_sep, margin, feasible, notes)
