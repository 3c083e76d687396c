"""Refinement rules x -> (d x K residual matrix) and their certificates.

Every generator evaluates batches: ``g(X)`` with ``X`` of shape (n, d) returns
(n, d, K); a single point of shape (d,) gives (d, K). Column k is the residual
of child slot k.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .sampling import ReferencePacking, haar_sample, make_rng, reference_packing

_REGISTRY: dict[str, type["Generator"]] = {}


def register(kind: str):
    def deco(cls):
        cls.kind = kind
        _REGISTRY[kind] = cls
        return cls
    return deco


class Generator:
    kind = "abstract"
    d: int
    K: int
    # IFS-derived rules absorb all contraction into the maps and use s = 1
    natural_scale: float | None = None
    # bound on residual norms used for the root ball C_root = B(x0, lambda_max)
    lambda_max: float | None = None

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            if x.shape[0] != self.d:
                raise ValueError(f"expected a {self.d}-vector, got shape {x.shape}")
            return self.evaluate(x[None, :])[0]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"expected shape (n, {self.d}), got {x.shape}")
        return self.evaluate(x)

    def params(self) -> dict:
        raise TypeError(f"{type(self).__name__} is not serializable")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "K": self.K, "params": self.params()}

    def save(self, path) -> None:
        _atomic_write(Path(path), json.dumps(self.to_dict()))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _arr(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def generator_from_dict(doc: dict) -> Generator:
    # learned generators register themselves on import
    from . import learn  # noqa: F401

    try:
        cls = _REGISTRY[doc["kind"]]
    except KeyError:
        raise ValueError(f"unknown generator kind {doc.get('kind')!r}") from None
    return cls.from_params(doc["params"])


def load_generator(path) -> Generator:
    return generator_from_dict(json.loads(Path(path).read_text()))


class FunctionGenerator(Generator):
    """Wraps an arbitrary batched callable; not serializable."""

    kind = "function"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], d: int, K: int):
        self.fn, self.d, self.K = fn, d, K

    def evaluate(self, X):
        return np.asarray(self.fn(X), dtype=float)


@register("constant")
class ConstantGenerator(Generator):
    def __init__(self, C):
        self.C = np.array(C, dtype=float)
        self.d, self.K = self.C.shape
        self.lambda_max = float(np.linalg.norm(self.C, axis=0).max())

    def evaluate(self, X):
        return np.broadcast_to(self.C, (len(X), self.d, self.K)).copy()

    def params(self):
        return {"C": _arr(self.C)}

    @classmethod
    def from_params(cls, p):
        return cls(np.array(p["C"]))


@register("affine")
class AffineGenerator(Generator):
    """r(x)_k = A_k x + b_k with A of shape (K, d, d) and b of shape (d, K)."""

    def __init__(self, A, b):
        self.A = np.array(A, dtype=float)
        self.b = np.array(b, dtype=float)
        self.K, self.d, _ = self.A.shape

    def evaluate(self, X):
        return np.einsum("kij,nj->nik", self.A, X) + self.b[None]

    def params(self):
        return {"A": _arr(self.A), "b": _arr(self.b)}

    @classmethod
    def from_params(cls, p):
        return cls(np.array(p["A"]), np.array(p["b"]))


class LevelScaledGenerator(Generator):
    """Absorbs the per-level factor s^(l+1) into the rule, for use with s = 1."""

    kind = "level-scaled"
    level_aware = True

    def __init__(self, inner: Generator, s: float):
        self.inner, self.s = inner, s
        self.d, self.K = inner.d, inner.K

    def evaluate(self, X, level: int = 0):
        return self.s ** (level + 1) * self.inner.evaluate(X)


# --- packed neural CFG -------------------------------------------------------

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def skew_expm(S: np.ndarray) -> np.ndarray:
    """Matrix exponential of a batch of skew-symmetric matrices (n, d, d)."""
    d = S.shape[-1]
    if d == 2:
        theta = S[..., 1, 0]
        c, s = np.cos(theta), np.sin(theta)
        out = np.empty_like(S)
        out[..., 0, 0] = c
        out[..., 0, 1] = -s
        out[..., 1, 0] = s
        out[..., 1, 1] = c
        return out
    return expm(S)


@register("packed-neural")
class NeuralCFG(Generator):
    """r(x) = exp(S1(x)) diag(sigma(x)) exp(S2(x)) C with gated tanh networks.

    S_i(x) is the skew part of mat(nu * sigmoid(B_i tanh(W_i x + b_i))), where
    mat reshapes a d^2 vector row-major. sigma(x) lies in [sigma_min, sigma_max].
    """

    def __init__(self, C, nu, sigma_min, sigma_max, W1, b1, B1, W2, b2, B2,
                 Ws, bs, Bs, seeds=(None, None), chunk: int = 8192):
        self.C = np.array(C, dtype=float)
        self.d, self.K = self.C.shape
        if not 0 < sigma_min <= sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        self.nu, self.sigma_min, self.sigma_max = float(nu), float(sigma_min), float(sigma_max)
        self.W1, self.b1, self.B1 = (np.array(a, dtype=float) for a in (W1, b1, B1))
        self.W2, self.b2, self.B2 = (np.array(a, dtype=float) for a in (W2, b2, B2))
        self.Ws, self.bs, self.Bs = (np.array(a, dtype=float) for a in (Ws, bs, Bs))
        self.hidden = self.W1.shape[0]
        d, h = self.d, self.hidden
        if self.B1.shape != (d * d, h) or self.B2.shape != (d * d, h):
            raise ValueError("B_i must have shape d^2 x h")
        if self.Bs.shape != (d, h):
            raise ValueError("B_sigma must have shape d x h")
        self.seeds = tuple(seeds)
        self.chunk = chunk
        self.packing = ReferencePacking.from_columns(self.C)
        self.lambda_max = self.sigma_max * self.packing.lambda_plus

    def _gated_skew(self, X, W, b, B):
        A = self.nu * sigmoid(np.tanh(X @ W.T + b) @ B.T)
        A = A.reshape(len(X), self.d, self.d)
        return 0.5 * (A - A.transpose(0, 2, 1))

    def skew_fields(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (self._gated_skew(X, self.W1, self.b1, self.B1),
                self._gated_skew(X, self.W2, self.b2, self.B2))

    def sigma(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = np.tanh(X @ self.Ws.T + self.bs) @ self.Bs.T
        return self.sigma_min + (self.sigma_max - self.sigma_min) * sigmoid(z)

    def evaluate(self, X):
        out = np.empty((len(X), self.d, self.K))
        for i in range(0, len(X), self.chunk):
            Xc = X[i:i + self.chunk]
            S1, S2 = self.skew_fields(Xc)
            E1, E2 = skew_expm(S1), skew_expm(S2)
            M = E1 * self.sigma(Xc)[:, None, :]  # E1 @ diag(sigma)
            out[i:i + self.chunk] = M @ E2 @ self.C
        return out

    def params(self):
        names = ["W1", "b1", "B1", "W2", "b2", "B2", "Ws", "bs", "Bs"]
        p = {n: _arr(getattr(self, n)) for n in names}
        p.update(C=_arr(self.C), nu=self.nu, sigma_min=self.sigma_min,
                 sigma_max=self.sigma_max, seeds=list(self.seeds))
        return p

    @classmethod
    def from_params(cls, p):
        names = ["W1", "b1", "B1", "W2", "b2", "B2", "Ws", "bs", "Bs"]
        return cls(np.array(p["C"]), p["nu"], p["sigma_min"], p["sigma_max"],
                   *(np.array(p[n]) for n in names), seeds=tuple(p.get("seeds", (None, None))))


@dataclass(frozen=True)
class NeuralCfgHyper:
    nu: float = 3.25
    sigma_min: float = 0.1
    sigma_max: float = 1.0
    hidden: int = 500
    radius: float = 1.0
    packing_eps: float | None = None  # None: plain Haar template, no rejection
    template_seed_base: int = 1000
    param_seed_base: int = 2000


def sample_neural_cfg(d: int, K: int, hyper: NeuralCfgHyper = NeuralCfgHyper(),
                      trial: int = 0) -> NeuralCFG:
    """Trial t draws the template from seed 1000+t and the weights from 2000+t."""
    t_seed = hyper.template_seed_base + trial
    p_seed = hyper.param_seed_base + trial
    rng_c = make_rng(t_seed)
    if hyper.packing_eps is None:
        C = hyper.radius * haar_sample(d, rng_c, size=K).T
    else:
        C = reference_packing(d, K, hyper.packing_eps, rng_c, lambda_radius=hyper.radius).columns
    rng = make_rng(p_seed)
    h = hyper.hidden
    draw = rng.standard_normal
    W1, b1, B1 = draw((h, d)), draw(h), draw((d * d, h))
    W2, b2, B2 = draw((h, d)), draw(h), draw((d * d, h))
    Ws, bs, Bs = draw((h, d)), draw(h), draw((d, h))
    return NeuralCFG(C, hyper.nu, hyper.sigma_min, hyper.sigma_max,
                     W1, b1, B1, W2, b2, B2, Ws, bs, Bs, seeds=(t_seed, p_seed))


# --- axiom and regularity checks ----------------------------------------------

@dataclass
class AxiomReport:
    n_probes: int
    s_sep: float
    lambda_min: float
    lambda_max: float
    min_norm: float
    max_norm: float
    min_separation: float
    violations: list[tuple] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_cfg_axioms(g: Generator, probes: np.ndarray, s_sep: float,
                     lambda_min: float, lambda_max: float, tol: float = 1e-12) -> AxiomReport:
    """Annulus and pairwise-separation axioms at every probe point.

    Violations are tuples ``(probe_index, kind, k, k2, value)``.
    """
    probes = np.atleast_2d(probes)
    R = g(probes)
    norms = np.linalg.norm(R, axis=1)  # (n, K)
    viol = []
    for i, k in zip(*np.nonzero(norms < lambda_min - tol)):
        viol.append((int(i), "norm-low", int(k), None, float(norms[i, k])))
    for i, k in zip(*np.nonzero(norms > lambda_max + tol)):
        viol.append((int(i), "norm-high", int(k), None, float(norms[i, k])))
    min_sep = np.inf
    for k in range(g.K):
        for k2 in range(k + 1, g.K):
            sep = np.linalg.norm(R[:, :, k] - R[:, :, k2], axis=1)
            min_sep = min(min_sep, float(sep.min()))
            for i in np.nonzero(sep < s_sep - tol)[0]:
                viol.append((int(i), "separation", k, k2, float(sep[i])))
    return AxiomReport(len(probes), s_sep, lambda_min, lambda_max,
                       float(norms.min()), float(norms.max()), min_sep, viol)


def uniform_ball(n: int, d: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    u = haar_sample(d, rng, size=n)
    return radius * u * rng.random((n, 1)) ** (1.0 / d)


def probe_pairs(n_pairs: int, d: int, rng: np.random.Generator):
    """Half independent uniform pairs in the unit ball, half close pairs.

    Close pairs use offsets with log-uniform length in [1e-3, 0.5], since
    Lipschitz ratios peak at short range.
    """
    n_far = n_pairs // 2
    n_near = n_pairs - n_far
    X1 = uniform_ball(n_far, d, rng)
    X2 = uniform_ball(n_far, d, rng)
    Y = uniform_ball(n_near, d, rng)
    step = 10 ** rng.uniform(-3, np.log10(0.5), size=(n_near, 1))
    Z = Y + step * haar_sample(d, rng, size=n_near)
    return np.vstack([X1, Y]), np.vstack([X2, Z])


def _field_ratio(F1, F2, X1, X2):
    """max over pairs of ||F(x) - F(x')|| / ||x - x'||, Frobenius over trailing axes."""
    num = np.sqrt(((F1 - F2) ** 2).reshape(len(F1), -1).sum(1))
    den = np.linalg.norm(X1 - X2, axis=1)
    keep = den > 0
    return num[keep] / den[keep]


def lipschitz_probe(g: Generator, pairs: int, rng: np.random.Generator,
                    points: np.ndarray | None = None) -> float:
    """Empirical max_k ||r_k(x) - r_k(x')|| / ||x - x'|| over sampled pairs.

    If ``points`` is given, all pairs among those points are included too.
    """
    X1, X2 = probe_pairs(pairs, g.d, rng)
    best = _slotwise_ratio(g, X1, X2)
    if points is not None and len(points) >= 2:
        P = np.asarray(points, dtype=float)
        i, j = np.triu_indices(len(P), 1)
        R = g(P)
        num = np.linalg.norm(R[i] - R[j], axis=1).max(axis=1)
        den = np.linalg.norm(P[i] - P[j], axis=1)
        keep = den > 0
        if keep.any():
            best = max(best, float((num[keep] / den[keep]).max()))
    return best


def _slotwise_ratio(g, X1, X2) -> float:
    R1, R2 = g(X1), g(X2)
    num = np.linalg.norm(R1 - R2, axis=1).max(axis=1)
    den = np.linalg.norm(X1 - X2, axis=1)
    keep = den > 0
    return float((num[keep] / den[keep]).max()) if keep.any() else 0.0


@dataclass
class NeuralLipschitz:
    L_r: float          # probed slotwise Lipschitz constant of r
    L_A1: float
    L_A2: float
    L_sigma: float
    composite: float    # lambda_+ (sigma_max L_A1 + L_sigma + sigma_max L_A2)


def neural_cfg_lipschitz(g: NeuralCFG, pairs: int, rng: np.random.Generator) -> NeuralLipschitz:
    """Probe r and its three ingredient fields on one shared set of pairs."""
    X1, X2 = probe_pairs(pairs, g.d, rng)
    S1a, S2a = g.skew_fields(X1)
    S1b, S2b = g.skew_fields(X2)
    L_A1 = float(_field_ratio(S1a, S1b, X1, X2).max())
    L_A2 = float(_field_ratio(S2a, S2b, X1, X2).max())  # A2 = -S2, same ratio
    L_s = float(_field_ratio(g.sigma(X1), g.sigma(X2), X1, X2).max())
    L_r = _slotwise_ratio(g, X1, X2)
    lam = g.packing.lambda_plus
    comp = lam * (g.sigma_max * L_A1 + L_s + g.sigma_max * L_A2)
    return NeuralLipschitz(L_r, L_A1, L_A2, L_s, comp)


# --- iterated function systems -------------------------------------------------

class NonContractive(ValueError):
    pass


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class IfsMap:
    """f(x) = A x + b + alpha [sin(<w1,x> + phi), cos(<w2,x> - 0.37 phi)] + quad x*x."""

    A: np.ndarray
    b: np.ndarray
    alpha: float = 0.0
    w1: np.ndarray = field(default_factory=lambda: np.zeros(2))
    w2: np.ndarray = field(default_factory=lambda: np.zeros(2))
    phi: float = 0.0
    quad: float = 0.0  # kept at zero for every shipped family

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = X @ np.asarray(self.A).T + self.b
        if self.alpha:
            warp = np.stack([np.sin(X @ self.w1 + self.phi),
                             np.cos(X @ self.w2 - 0.37 * self.phi)], axis=1)
            out = out + self.alpha * warp
        if self.quad:
            out = out + self.quad * X * X
        return out

    def lipschitz_bound(self) -> float:
        if self.quad:
            raise NonContractive("quadratic perturbation has no global Lipschitz bound")
        return float(np.linalg.norm(self.A, 2)
                     + self.alpha * np.sqrt(np.dot(self.w1, self.w1) + np.dot(self.w2, self.w2)))

    def to_dict(self):
        return {"A": _arr(self.A), "b": _arr(self.b), "alpha": self.alpha,
                "w1": _arr(self.w1), "w2": _arr(self.w2), "phi": self.phi, "quad": self.quad}

    @classmethod
    def from_dict(cls, p):
        return cls(np.array(p["A"]), np.array(p["b"]), p["alpha"], np.array(p["w1"]),
                   np.array(p["w2"]), p["phi"], p.get("quad", 0.0))


@dataclass(frozen=True)
class IfsFamily:
    name: str
    maps: tuple[IfsMap, ...]
    root: np.ndarray
    fixed: bool

    @property
    def K(self) -> int:
        return len(self.maps)


IFS_NAMES = ("sierpinski", "cantor", "koch", "random-affine",
             "nl-sierpinski", "nl-cantor", "nl-koch", "nl-random")

_SIERPINSKI_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
_CANTOR_SHIFTS = np.array([[0.0, 0.0], [2 / 3, 0.0], [0.0, 2 / 3], [2 / 3, 2 / 3]])
_KOCH_LINEAR = (np.eye(2) / 3, rotation(np.pi / 3) / 3, rotation(-np.pi / 3) / 3, np.eye(2) / 3)
_KOCH_SHIFTS = np.array([[0.0, 0.0], [1 / 3, 0.0], [0.5, np.sqrt(3) / 6], [2 / 3, 0.0]])


def _warp_schedule(k: int, phase_step: float, alpha: float = 0.080):
    # child index k is zero-based
    w1 = np.array([3.00 + 0.30 * k, 2.10 - 0.20 * k])
    w2 = np.array([-1.80 + 0.20 * k, 3.00 + 0.25 * k])
    return dict(alpha=alpha, w1=w1, w2=w2, phi=phase_step * k)


def _fixed_affine(name: str):
    if name == "sierpinski":
        maps = [(np.eye(2) / 2, v / 2) for v in _SIERPINSKI_VERTICES]
        root = _SIERPINSKI_VERTICES.mean(axis=0)
    elif name == "cantor":
        maps = [(np.eye(2) / 3, b) for b in _CANTOR_SHIFTS]
        root = np.array([0.5, 0.5])
    elif name == "koch":
        maps = list(zip(_KOCH_LINEAR, _KOCH_SHIFTS))
        root = np.array([0.5, 0.0])
    else:
        raise ValueError(name)
    return maps, root


def ifs_family(name: str, trial: int = 0, rng: np.random.Generator | None = None) -> IfsFamily:
    """The eight IFS benchmark families; random ones are resampled per trial."""
    if name not in IFS_NAMES:
        raise ValueError(f"unknown IFS family {name!r}; choose from {IFS_NAMES}")
    if name in ("sierpinski", "cantor", "koch"):
        maps, root = _fixed_affine(name)
        return IfsFamily(name, tuple(IfsMap(A, b) for A, b in maps), root, True)
    if name in ("nl-sierpinski", "nl-cantor", "nl-koch"):
        base = name[3:]
        step = {"sierpinski": 0.80, "cantor": 0.60, "koch": 0.70}[base]
        maps, root = _fixed_affine(base)
        return IfsFamily(name, tuple(IfsMap(A, b, **_warp_schedule(k, step))
                                     for k, (A, b) in enumerate(maps)), root, True)

    rng = make_rng(trial) if rng is None else rng
    out = []
    if name == "random-affine":
        for _ in range(3):
            c = rng.uniform(0.2, 0.45)
            theta = rng.uniform(0, 2 * np.pi)
            b = rng.uniform(-0.5, 0.5, size=2)
            out.append(IfsMap(c * rotation(theta), b))
    else:  # nl-random
        for _ in range(3):
            c = rng.uniform(0.20, 0.38)
            theta = rng.uniform(0, 2 * np.pi)
            b = rng.uniform(-0.45, 0.45, size=2)
            w1 = haar_sample(2, rng) * rng.uniform(2.5, 3.5)
            w2 = haar_sample(2, rng) * rng.uniform(2.5, 3.5)
            phi = rng.uniform(0, 2 * np.pi)
            alpha = rng.uniform(0.055, 0.085)
            out.append(IfsMap(c * rotation(theta), b, alpha, w1, w2, phi))
    return IfsFamily(name, tuple(out), np.zeros(2), False)


def contractivity_certificate(fam: IfsFamily) -> np.ndarray:
    """L_k = ||A_k||_2 + alpha_k sqrt(||w1_k||^2 + ||w2_k||^2); all must be < 1."""
    L = np.array([m.lipschitz_bound() for m in fam.maps])
    if np.any(L >= 1):
        raise NonContractive(f"{fam.name}: Lipschitz certificates {L} not all < 1")
    return L


@register("ifs")
class IfsGenerator(Generator):
    """r(x)_k = f_k(x) - x; intended for rollout with s = 1."""

    natural_scale = 1.0
    lambda_max = 1.0

    def __init__(self, family: IfsFamily):
        self.family = family
        self.d, self.K = 2, family.K

    def evaluate(self, X):
        return np.stack([f(X) - X for f in self.family.maps], axis=2)

    def params(self):
        f = self.family
        return {"name": f.name, "fixed": f.fixed, "root": _arr(f.root),
                "maps": [m.to_dict() for m in f.maps]}

    @classmethod
    def from_params(cls, p):
        maps = tuple(IfsMap.from_dict(m) for m in p["maps"])
        return cls(IfsFamily(p["name"], maps, np.array(p["root"]), p["fixed"]))


def ifs_as_generator(fam: IfsFamily) -> IfsGenerator:
    return IfsGenerator(fam)
