"""Haar sampling on the sphere and separated reference packings."""
from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb, gamma, pi, sqrt

import numpy as np


class InvalidDimension(ValueError):
    pass


class PackingFailure(RuntimeError):
    pass


def make_rng(seed: int | None) -> np.random.Generator:
    """Counter-based 64-bit stream (Philox); reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def haar_sample(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform point(s) on S^{d-1} by normalising a standard Gaussian draw."""
    if d < 2:
        raise InvalidDimension(f"d must be >= 2, got {d}")
    shape = (d,) if size is None else (size, d)
    g = rng.standard_normal(shape)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norm


def kappa(d: int) -> float:
    if d < 2:
        raise InvalidDimension(f"d must be >= 2, got {d}")
    return gamma(d / 2) / ((d - 1) * sqrt(pi) * gamma((d - 1) / 2))


def cap_probability_bound(d: int, eps: float) -> float:
    """Upper bound kappa_d * eps^(d-1) on the Haar mass of an eps-cap."""
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    return kappa(d) * eps ** (d - 1)


def pair_separation_bound(d: int, m: int, eps: float) -> float:
    """Union-bound lower bound on P(m Haar points are pairwise eps-separated)."""
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if eps == 0:
        return 1.0
    return max(0.0, 1.0 - comb(m, 2) * cap_probability_bound(d, eps))


def min_pairwise_distance(points: np.ndarray) -> float:
    """Smallest Euclidean distance between rows; inf for fewer than two rows."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return float("inf")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    iu = np.triu_indices(len(pts), 1)
    return float(dist[iu].min())


@dataclass(frozen=True)
class ReferencePacking:
    columns: np.ndarray  # d x K
    lambda_minus: float
    lambda_plus: float
    epsilon: float

    def __post_init__(self):
        c = np.asarray(self.columns, dtype=float)
        if c.ndim != 2:
            raise ValueError("packing columns must be a d x K matrix")
        object.__setattr__(self, "columns", c)
        norms = np.linalg.norm(c, axis=0)
        tol = 1e-12 * max(1.0, self.lambda_plus)
        if np.any(norms < self.lambda_minus - tol) or np.any(norms > self.lambda_plus + tol):
            raise ValueError("packing column norms leave the annulus")
        if self.lambda_minus > self.lambda_plus:
            raise ValueError("lambda_minus > lambda_plus")
        if min_pairwise_distance(c.T) < self.epsilon - tol:
            raise ValueError("packing columns are not epsilon-separated")

    @property
    def d(self) -> int:
        return self.columns.shape[0]

    @property
    def K(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def from_columns(cls, columns: np.ndarray) -> "ReferencePacking":
        """Tightest (lambda-, lambda+, eps) description of an arbitrary matrix."""
        c = np.asarray(columns, dtype=float)
        norms = np.linalg.norm(c, axis=0)
        sep = min_pairwise_distance(c.T)
        return cls(c, float(norms.min()), float(norms.max()), 0.0 if np.isinf(sep) else sep)

    def to_json(self) -> str:
        return json.dumps({
            "rows": self.columns.tolist(),
            "lambda_minus": self.lambda_minus,
            "lambda_plus": self.lambda_plus,
            "epsilon": self.epsilon,
        })

    @classmethod
    def from_json(cls, text: str) -> "ReferencePacking":
        doc = json.loads(text)
        return cls(np.array(doc["rows"], dtype=float), doc["lambda_minus"],
                   doc["lambda_plus"], doc["epsilon"])


def reference_packing(
    d: int,
    K: int,
    eps: float,
    rng: np.random.Generator,
    lambda_radius: float = 1.0,
    max_attempts: int = 100_000,
) -> ReferencePacking:
    """Rejection sampling of K eps-separated Haar points, scaled to lambda_radius.

    Points are accepted in draw order. Separation is tested on the unit sphere,
    so the scaled columns are ``eps * lambda_radius`` apart.
    """
    if d < 2:
        raise InvalidDimension(f"d must be >= 2, got {d}")
    if K < 1 or eps <= 0:
        raise ValueError("need K >= 1 and eps > 0")
    accepted: list[np.ndarray] = []
    for _ in range(max_attempts):
        u = haar_sample(d, rng)
        if all(np.linalg.norm(u - v) >= eps for v in accepted):
            accepted.append(u)
            if len(accepted) == K:
                cols = lambda_radius * np.stack(accepted, axis=1)
                return ReferencePacking(cols, lambda_radius, lambda_radius,
                                        eps * lambda_radius)
    raise PackingFailure(
        f"only {len(accepted)} of {K} points accepted after {max_attempts} draws "
        f"(eps={eps} too large for d={d})"
    )
