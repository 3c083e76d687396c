"""Addresses, recursive rollout, sampled Voronoi cells and the hierarchy file format.

Level ``l`` of a hierarchy stores its K^l centres parent-major in child-slot
order, so the slot-k child (k = 1..K) of flat index p sits at ``p*K + k - 1``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .generators import Generator, NeuralCFG, _atomic_write

MAX_NODES = 10**7

Address = tuple[int, ...]


class AdmissibilityViolation(RuntimeError):
    pass


class HierarchyParseError(ValueError):
    pass


class HierarchyValidationError(ValueError):
    pass


# --- addresses --------------------------------------------------------------

def address_to_index(alpha: Sequence[int], K: int) -> tuple[int, int]:
    """(level, flat index) of an address with letters in 1..K."""
    idx = 0
    for a in alpha:
        if not 1 <= a <= K:
            raise ValueError(f"letter {a} outside 1..{K}")
        idx = idx * K + (a - 1)
    return len(alpha), idx


def index_to_address(level: int, idx: int, K: int) -> Address:
    if not 0 <= idx < K**level:
        raise ValueError(f"index {idx} out of range for level {level}")
    out = []
    for _ in range(level):
        idx, r = divmod(idx, K)
        out.append(r + 1)
    return tuple(reversed(out))


def common_prefix_length(alpha: Sequence[int], beta: Sequence[int]) -> int:
    c = 0
    for a, b in zip(alpha, beta):
        if a != b:
            break
        c += 1
    return c


def ancestor_index(idx, level: int, to_level: int, K: int):
    """Flat index of the level-``to_level`` ancestor (works on arrays)."""
    return idx // K ** (level - to_level)


# --- hierarchy ----------------------------------------------------------------

@dataclass
class Hierarchy:
    d: int
    K: int
    s: float
    root: np.ndarray
    levels: list[np.ndarray]
    generator_tag: str = ""

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=float)
        self.levels = [np.asarray(lv, dtype=float).reshape(-1, self.d) for lv in self.levels]
        self.validate()

    def validate(self):
        if self.root.shape != (self.d,):
            raise HierarchyValidationError(f"root has shape {self.root.shape}, expected ({self.d},)")
        if not self.levels:
            raise HierarchyValidationError("hierarchy has no levels")
        for l, lv in enumerate(self.levels):
            if len(lv) != self.K**l:
                raise HierarchyValidationError(
                    f"level {l} has {len(lv)} nodes, expected K^{l} = {self.K**l}")
        if not np.array_equal(self.levels[0][0], self.root):
            raise HierarchyValidationError("level 0 must be {root}")

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def node(self, alpha: Sequence[int]) -> np.ndarray:
        level, idx = address_to_index(alpha, self.K)
        return self.levels[level][idx]

    def children(self, level: int, parent: int) -> np.ndarray:
        return self.levels[level + 1][parent * self.K:(parent + 1) * self.K]

    def truncate(self, L: int) -> "Hierarchy":
        return Hierarchy(self.d, self.K, self.s, self.root, self.levels[:L + 1], self.generator_tag)

    def all_nodes(self, L: int | None = None) -> np.ndarray:
        L = self.depth if L is None else L
        return np.vstack(self.levels[:L + 1])

    def normalized_residuals(self, level: int) -> np.ndarray:
        """(chld(x)_k - x) / s^(level+1) for parents at ``level``; shape (K^l, d, K)."""
        par = self.levels[level]
        ch = self.levels[level + 1].reshape(len(par), self.K, self.d)
        return (ch - par[:, None, :]).transpose(0, 2, 1) / self.s ** (level + 1)

    def to_dict(self) -> dict:
        return {"d": self.d, "K": self.K, "s": self.s, "root": self.root.tolist(),
                "levels": [lv.tolist() for lv in self.levels],
                "generator_tag": self.generator_tag}

    def equals(self, other: "Hierarchy") -> bool:
        return (self.d == other.d and self.K == other.K and self.s == other.s
                and self.generator_tag == other.generator_tag
                and np.array_equal(self.root, other.root)
                and len(self.levels) == len(other.levels)
                and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels)))


def rollout(g: Generator, x0, s: float | None = None, L: int = 0, *,
            lambda_check: float | None = None, allow_large: bool = False,
            tag: str | None = None) -> Hierarchy:
    """Generate levels 0..L from the root using only ``g``; no ground truth enters.

    ``s`` defaults to the generator's natural scale (1 for IFS rules).
    Neural CFGs are guarded by ``lambda_check = 1.0`` unless told otherwise.
    """
    x0 = np.asarray(x0, dtype=float)
    if s is None:
        s = g.natural_scale
    if s is None or not 0 < s <= 1:
        raise ValueError(f"scale s must lie in (0, 1], got {s}")
    if L < 0:
        raise ValueError("depth L must be >= 0")
    if x0.shape != (g.d,):
        raise ValueError(f"root dimension {x0.shape} does not match generator d={g.d}")
    if g.K**L > MAX_NODES and not allow_large:
        raise ValueError(f"K^L = {g.K**L} nodes exceeds {MAX_NODES}; pass allow_large=True")
    if lambda_check is None and isinstance(g, NeuralCFG):
        lambda_check = 1.0
    level_aware = getattr(g, "level_aware", False)

    levels = [x0[None, :].copy()]
    for l in range(L):
        par = levels[-1]
        R = g.evaluate(par, level=l) if level_aware else g.evaluate(par)
        if lambda_check is not None:
            worst = np.linalg.norm(R, axis=1).max()
            if worst > lambda_check:
                raise AdmissibilityViolation(
                    f"residual norm {worst:.6g} > lambda_check={lambda_check} at level {l}")
        # children (n, K, d), parent-major then slot order
        ch = par[:, None, :] + s ** (l + 1) * R.transpose(0, 2, 1)
        levels.append(ch.reshape(-1, g.d))
    return Hierarchy(g.d, g.K, float(s), x0, levels, tag if tag is not None else g.kind)


def duplicate_groups(h: Hierarchy, L: int | None = None) -> list[list[tuple[int, int]]]:
    """Groups of (level, index) nodes with bit-identical coordinates."""
    L = h.depth if L is None else L
    seen: dict[bytes, list[tuple[int, int]]] = {}
    for l in range(L + 1):
        for i, x in enumerate(h.levels[l]):
            seen.setdefault(x.tobytes(), []).append((l, i))
    return [g for g in seen.values() if len(g) > 1]


def near_duplicates(h: Hierarchy, tol: float, L: int | None = None) -> int:
    """Number of distinct node pairs closer than ``tol`` but not identical."""
    from scipy.spatial import cKDTree

    X = h.all_nodes(L)
    pairs = cKDTree(X).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return 0
    same = np.all(X[pairs[:, 0]] == X[pairs[:, 1]], axis=1)
    return int((~same).sum())


# --- file formats -------------------------------------------------------------

def save_hierarchy(h: Hierarchy, path) -> None:
    _atomic_write(Path(path), json.dumps(h.to_dict()))


def hierarchy_from_dict(doc, where: str = "$") -> Hierarchy:
    if not isinstance(doc, dict):
        raise HierarchyParseError(f"{where}: expected an object")
    for key in ("d", "K", "s", "root", "levels"):
        if key not in doc:
            raise HierarchyParseError(f"{where}: missing key {key!r}")
    if not isinstance(doc["levels"], list):
        raise HierarchyParseError(f"{where}.levels: expected a list")
    levels = []
    for l, lv in enumerate(doc["levels"]):
        try:
            arr = np.array(lv, dtype=float)
        except (TypeError, ValueError) as exc:
            raise HierarchyParseError(f"{where}.levels[{l}]: {exc}") from None
        if arr.ndim != 2 or arr.shape[1] != doc["d"]:
            raise HierarchyValidationError(
                f"{where}.levels[{l}]: expected rows of length {doc['d']}, got shape {arr.shape}")
        levels.append(arr)
    return Hierarchy(int(doc["d"]), int(doc["K"]), float(doc["s"]), np.array(doc["root"], dtype=float),
                     levels, doc.get("generator_tag", ""))


def load_hierarchy(path) -> Hierarchy:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HierarchyParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return hierarchy_from_dict(doc)


def export_level_csv(h: Hierarchy, level: int, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"x{i}" for i in range(h.d)])
        for i, x in enumerate(h.levels[level]):
            w.writerow([i] + [repr(float(v)) for v in x])
    tmp.replace(path)


# --- sampled Voronoi cells ------------------------------------------------------

def pnorm(v: np.ndarray, p: float, axis: int = -1) -> np.ndarray:
    if p == 2:
        return np.sqrt((v * v).sum(axis))
    if p == 1:
        return np.abs(v).sum(axis)
    if np.isinf(p):
        return np.abs(v).max(axis)
    return (np.abs(v) ** p).sum(axis) ** (1.0 / p)


def uniform_lp_ball(n: int, centre: np.ndarray, radius: float, p: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Uniform points in B_p(centre, radius) by rejection from the bounding cube."""
    d = len(centre)
    out, have = [], 0
    while have < n:
        batch = rng.uniform(-radius, radius, size=(max(2 * (n - have), 1024), d))
        batch = batch[pnorm(batch, p) <= radius]
        out.append(batch)
        have += len(batch)
    return np.vstack(out)[:n] + centre


def route(h: Hierarchy, points: np.ndarray, p: float, depth: int) -> list[np.ndarray]:
    """Recursive nearest-child assignment; ties go to the lowest child slot."""
    points = np.atleast_2d(points)
    assign = [np.zeros(len(points), dtype=np.int64)]
    offsets = np.arange(h.K)
    for l in range(depth):
        kids = assign[-1][:, None] * h.K + offsets  # (n, K)
        dist = pnorm(h.levels[l + 1][kids] - points[:, None, :], p)
        assign.append(kids[np.arange(len(points)), np.argmin(dist, axis=1)])
    return assign


@dataclass
class CellSample:
    address: Address
    centre: np.ndarray
    member_points: np.ndarray


@dataclass
class CellPartition:
    """Monte-Carlo representation of the nested cells C_alpha down to ``depth``."""

    hierarchy: Hierarchy
    p: float
    lambda_max: float
    points: np.ndarray
    assign: list[np.ndarray]
    empty: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._order = [np.argsort(a, kind="stable") for a in self.assign]
        self._starts = [np.searchsorted(a[o], np.arange(self.hierarchy.K**l + 1))
                        for l, (a, o) in enumerate(zip(self.assign, self._order))]
        for l, st in enumerate(self._starts):
            counts = np.diff(st)
            if np.any(counts == 0):
                self.empty[l] = np.nonzero(counts == 0)[0]

    @property
    def depth(self) -> int:
        return len(self.assign) - 1

    def counts(self, level: int) -> np.ndarray:
        return np.diff(self._starts[level])

    def member_indices(self, level: int, idx: int) -> np.ndarray:
        st = self._starts[level]
        return self._order[level][st[idx]:st[idx + 1]]

    def members(self, level: int, idx: int) -> np.ndarray:
        return self.points[self.member_indices(level, idx)]

    def cell(self, level: int, idx: int) -> CellSample:
        K = self.hierarchy.K
        return CellSample(index_to_address(level, idx, K),
                          self.hierarchy.levels[level][idx], self.members(level, idx))

    def n_empty(self) -> int:
        return int(sum(len(v) for v in self.empty.values()))

    def centres_in_own_cells(self, level: int) -> np.ndarray:
        """Boolean mask: does x_alpha route to alpha through the cell recursion?"""
        h = self.hierarchy
        inside = pnorm(h.levels[level] - h.root, self.p) <= self.lambda_max
        routed = route(h, h.levels[level], self.p, level)[-1]
        return inside & (routed == np.arange(len(h.levels[level])))


def voronoi_cells(h: Hierarchy, p: float = 2, n_samples: int = 200_000,
                  lambda_max: float | None = None, rng: np.random.Generator | None = None,
                  depth: int | None = None, lambda_default: float = 1.0) -> CellPartition:
    """Sample the root ball B_p(x0, lambda_max) and assign points level by level."""
    if p < 1:
        raise ValueError("norm order p must be >= 1")
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    from .sampling import make_rng

    rng = make_rng(0) if rng is None else rng
    lam = lambda_default if lambda_max is None else lambda_max
    depth = h.depth if depth is None else depth
    pts = uniform_lp_ball(n_samples, h.root, lam, p, rng)
    return CellPartition(h, p, lam, pts, route(h, pts, p, depth))


def covering_radius(points: np.ndarray, probes: np.ndarray, p: float = 2) -> float:
    """max over probes of the distance to the nearest sample point."""
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(points).query(probes, p=p)
    return float(dist.max())
