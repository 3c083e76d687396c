"""From-scratch residual predictors, Adam, the prefix loss, baselines and child canonicalization."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .generators import AffineGenerator, ConstantGenerator, Generator, register
from .hierarchy import Hierarchy
from .sampling import make_rng

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "gelu")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TrainingFailure(RuntimeError):
    def __init__(self, msg: str, history: list[float]):
        super().__init__(msg)
        self.history = history


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def to_residual_matrix(out: np.ndarray, d: int, K: int) -> np.ndarray:
    """Column-major reshape of (n, dK) outputs to (n, d, K): column k is out[:, kd:(k+1)d]."""
    return out.reshape(len(out), K, d).transpose(0, 2, 1)


def from_residual_matrix(R: np.ndarray) -> np.ndarray:
    n, d, K = R.shape
    return R.transpose(0, 2, 1).reshape(n, d * K)


# --- models ---------------------------------------------------------------------
#
# A model exposes a flat list of parameter arrays, ``forward(X) -> (R, cache)``
# with R of shape (n, d, K), and ``backward(cache, dR) -> grads`` matching
# ``params`` one to one.

@dataclass
class MlpParams:
    weights: list[np.ndarray]  # weights[i] has shape (in, out)
    biases: list[np.ndarray]
    activation: str
    d: int
    K: int

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        if self.weights[0].shape[0] != self.d or self.weights[-1].shape[1] != self.d * self.K:
            raise ValueError("layer dims must run from d to d*K")
        for W, b, W_next in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (W.shape[1],):
                raise ValueError(f"bias shape {b.shape} does not match layer {W.shape}")
            if W_next is not None and W_next.shape[0] != W.shape[1]:
                raise ValueError("layer shapes do not chain")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"input width {X.shape[1]} != d={self.d}")
        acts, pre = [X], []
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i < last:
                pre.append(z)
                h = _act(z, self.activation)
                acts.append(h)
            else:
                h = z
        return to_residual_matrix(h, self.d, self.K), (acts, pre)

    def backward(self, cache, dR: np.ndarray) -> list[np.ndarray]:
        acts, pre = cache
        g = from_residual_matrix(dR)
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(g.sum(0))              # bias
            grads.append(acts[i].T @ g)          # weight
            if i > 0:
                g = (g @ self.weights[i].T) * _act_grad(pre[i - 1], self.activation)
        return grads[::-1]

    def min_abs_preactivation(self, X: np.ndarray) -> float:
        _, (_, pre) = self.forward(X)
        return float(min(np.abs(z).min() for z in pre)) if pre else np.inf


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Residual matrix (d, K) for one point, or (n, d, K) for a batch."""
    x = np.asarray(x, dtype=float)
    R, _ = params.forward(x)
    return R[0] if x.ndim == 1 else R


def init_mlp(d: int, K: int, hidden: int = 64, depth: int = 4, activation: str = "relu",
             rng: np.random.Generator | None = None) -> MlpParams:
    """``depth`` affine layers; uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = make_rng(0) if rng is None else rng
    dims = [d] + [hidden] * (depth - 1) + [d * K]
    Ws, bs = [], []
    for fin, fout in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fin)
        Ws.append(rng.uniform(-bound, bound, size=(fin, fout)))
        bs.append(rng.uniform(-bound, bound, size=fout))
    return MlpParams(Ws, bs, activation, d, K)


@dataclass
class ConstModel:
    """r(x)_k = c_k."""
    c: np.ndarray  # (d, K)

    @property
    def params(self):
        return [self.c]

    def forward(self, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.c, (len(X),) + self.c.shape).copy(), None

    def backward(self, cache, dR):
        return [dR.sum(0)]


@dataclass
class AffineModel:
    """r(x)_k = A_k x + b_k."""
    A: np.ndarray  # (K, d, d)
    b: np.ndarray  # (d, K)

    @property
    def params(self):
        return [self.A, self.b]

    def forward(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.einsum("kij,nj->nik", self.A, X) + self.b, X

    def backward(self, X, dR):
        return [np.einsum("nik,nj->kij", dR, X), dR.sum(0)]


# --- data and loss --------------------------------------------------------------

@dataclass
class PrefixDataset:
    X: np.ndarray  # (n, d) parents
    Y: np.ndarray  # (n, d, K) ordered children
    a: np.ndarray  # (n,) scale factor s^(l+1)
    levels: np.ndarray

    def __post_init__(self):
        if len(self.X) == 0:
            raise ValueError("empty prefix dataset")
        if self.Y.shape != self.X.shape + (self.Y.shape[2],) or len(self.a) != len(self.X):
            raise ValueError("inconsistent prefix dataset shapes")

    @property
    def K(self) -> int:
        return self.Y.shape[2]

    @classmethod
    def from_hierarchy(cls, h: Hierarchy, L_train: int) -> "PrefixDataset":
        """Parents from levels 0..L_train-1 with their observed children."""
        if not 1 <= L_train <= h.depth:
            raise ValueError(f"L_train={L_train} needs 1 <= L_train <= depth={h.depth}")
        X, Y, a, lv = [], [], [], []
        for l in range(L_train):
            par = h.levels[l]
            X.append(par)
            Y.append(h.levels[l + 1].reshape(len(par), h.K, h.d).transpose(0, 2, 1))
            a.append(np.full(len(par), h.s ** (l + 1)))
            lv.append(np.full(len(par), l))
        return cls(np.vstack(X), np.concatenate(Y), np.concatenate(a), np.concatenate(lv))


def prefix_loss(model, data: PrefixDataset, with_grad: bool = True):
    """Sum over tuples and slots of ||x + a r(x)_k - y_k||^2, and its gradient."""
    R, cache = model.forward(data.X)
    E = data.X[:, :, None] + data.a[:, None, None] * R - data.Y
    loss = float((E * E).sum())
    if not with_grad:
        return loss
    dR = 2.0 * data.a[:, None, None] * E
    return loss, model.backward(cache, dR)


# --- optimisation ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    hidden: int = 64
    depth: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Adam:
    def __init__(self, params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit(model, data: PrefixDataset, cfg: TrainConfig) -> list[float]:
    """Full-batch Adam; returns the loss recorded before each update plus the final loss."""
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        loss, grads = prefix_loss(model, data)
        history.append(loss)
        if not np.isfinite(loss):
            raise TrainingFailure(f"loss diverged at epoch {epoch}", history)
        opt.step(grads)
    final = prefix_loss(model, data, with_grad=False)
    if not np.isfinite(final):
        raise TrainingFailure("loss diverged after the last update", history)
    history.append(final)
    return history


# --- learned generators -----------------------------------------------------------

@register("learned-cfp")
class MlpGenerator(Generator):
    kind = "learned-cfp"

    def __init__(self, mlp: MlpParams, metadata: dict | None = None):
        self.mlp = mlp
        self.d, self.K = mlp.d, mlp.K
        self.metadata = dict(metadata or {})
        self.natural_scale = self.metadata.get("s")
        self.history: list[float] = []

    def evaluate(self, X):
        return self.mlp.forward(X)[0]

    def params(self) -> dict:
        return {"weights": [W.tolist() for W in self.mlp.weights],
                "biases": [b.tolist() for b in self.mlp.biases],
                "activation": self.mlp.activation, "metadata": self.metadata}

    @classmethod
    def from_params(cls, p: dict) -> "MlpGenerator":
        Ws = [np.array(W, dtype=float).reshape(len(W), -1) for W in p["weights"]]
        d = Ws[0].shape[0]
        mlp = MlpParams(Ws, [np.array(b, dtype=float) for b in p["biases"]], p["activation"],
                        d, Ws[-1].shape[1] // d)
        return cls(mlp, p.get("metadata"))


def _metadata(cfg: TrainConfig, h: Hierarchy, L_train: int, method: str) -> dict:
    return {"method": method, "s": h.s, "L_train": L_train, "train_config": asdict(cfg)}


def _check_prefix(h: Hierarchy, L_train: int) -> None:
    if not 1 <= L_train < h.depth + 1:
        raise ValueError(f"L_train={L_train} must lie in 1..{h.depth}")


def train_cfp(h: Hierarchy, L_train: int, cfg: TrainConfig = TrainConfig()) -> MlpGenerator:
    _check_prefix(h, L_train)
    data = PrefixDataset.from_hierarchy(h, L_train)
    mlp = init_mlp(h.d, h.K, cfg.hidden, cfg.depth, cfg.activation, make_rng(cfg.seed))
    hist = fit(mlp, data, cfg)
    g = MlpGenerator(mlp, _metadata(cfg, h, L_train, "cfp"))
    g.history = hist
    g.metadata["final_loss"] = hist[-1]
    return g


def avg_residual_baseline(h: Hierarchy, L_train: int, s: float | None = None) -> ConstantGenerator:
    """Slot-wise mean of normalised residuals over the N_par = sum_{l<L_train} K^l parents."""
    _check_prefix(h, L_train)
    s = h.s if s is None else s
    res = []
    for l in range(L_train):
        par = h.levels[l]
        ch = h.levels[l + 1].reshape(len(par), h.K, h.d).transpose(0, 2, 1)
        res.append((ch - par[:, :, None]) / s ** (l + 1))
    g = ConstantGenerator(np.concatenate(res).mean(0))
    g.natural_scale = s
    return g


def learnable_const_baseline(h: Hierarchy, L_train: int,
                             cfg: TrainConfig = TrainConfig()) -> ConstantGenerator:
    _check_prefix(h, L_train)
    model = ConstModel(np.zeros((h.d, h.K)))
    hist = fit(model, PrefixDataset.from_hierarchy(h, L_train), cfg)
    g = ConstantGenerator(model.c)
    g.natural_scale = h.s
    g.history = hist
    return g


def affine_baseline(h: Hierarchy, L_train: int, cfg: TrainConfig = TrainConfig(),
                    init: str = "default") -> AffineGenerator:
    """A_k x + b_k, i.e. one affine layer d -> dK with the column-major output reshape.

    ``init="default"`` draws the layer like any MLP layer from the seeded stream;
    ``init="zeros"`` starts from the zero map.
    """
    _check_prefix(h, L_train)
    if init == "default":
        layer = init_mlp(h.d, h.K, depth=1, activation=cfg.activation, rng=make_rng(cfg.seed))
    elif init == "zeros":
        layer = MlpParams([np.zeros((h.d, h.d * h.K))], [np.zeros(h.d * h.K)], cfg.activation, h.d, h.K)
    else:
        raise ValueError(f"unknown init {init!r}")
    hist = fit(layer, PrefixDataset.from_hierarchy(h, L_train), cfg)
    A, b = affine_from_layer(layer)
    g = AffineGenerator(A, b)
    g.natural_scale = h.s
    g.history = hist
    return g


def affine_from_layer(layer: MlpParams) -> tuple[np.ndarray, np.ndarray]:
    """(A, b) with A of shape (K, d, d) and b of shape (d, K) for a single-layer MLP."""
    if len(layer.weights) != 1:
        raise ValueError("expected a single affine layer")
    d, K = layer.d, layer.K
    W, c = layer.weights[0], layer.biases[0]
    return W.reshape(d, K, d).transpose(1, 2, 0).copy(), c.reshape(K, d).T.copy()


METHODS = ("cfp", "affine", "const", "avg")


def train_method(method: str, h: Hierarchy, L_train: int, cfg: TrainConfig = TrainConfig()) -> Generator:
    if method == "cfp":
        return train_cfp(h, L_train, cfg)
    if method == "affine":
        return affine_baseline(h, L_train, cfg)
    if method == "const":
        return learnable_const_baseline(h, L_train, cfg)
    if method == "avg":
        return avg_residual_baseline(h, L_train)
    raise ValueError(f"unknown method {method!r}")


def save_training_curve(history: list[float], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
    tmp.replace(path)


# --- child-slot canonicalization ------------------------------------------------

@dataclass
class Canonicalization:
    hierarchy: Hierarchy
    order: list[np.ndarray]  # order[l][j] = old flat index of new node j at level l
    basis: np.ndarray        # (d, 2) projection directions
    fallback: bool = False
    notes: list[str] = field(default_factory=list)


def pca_plane(X: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Top-2 principal directions with a sign convention; coordinate axes when rank-deficient."""
    d = X.shape[1]
    if d < 2:
        raise ValueError("canonicalization needs d >= 2")
    C = np.cov(X.T, bias=True) if len(X) > 1 else np.zeros((d, d))
    vals, vecs = np.linalg.eigh(C)
    idx = np.argsort(vals)[::-1][:2]
    if len(X) < 3 or vals[idx[1]] <= tol * max(vals[idx[0]], tol):
        return np.eye(d)[:, :2], True
    U = vecs[:, idx]
    for j in range(2):
        nz = np.flatnonzero(np.abs(U[:, j]) > tol)
        if U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
    return U, False


def child_order(parent: np.ndarray, children: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Slots sorted by polar angle of the projected displacement, ties broken by length."""
    delta = children - parent
    z = delta @ basis
    theta = np.arctan2(z[:, 1], z[:, 0])
    return np.lexsort((np.linalg.norm(delta, axis=1), theta))


def reorder(h: Hierarchy, slot_perm) -> tuple[Hierarchy, list[np.ndarray]]:
    """Apply per-parent slot permutations, moving descendant subtrees along.

    ``slot_perm(level, old_parent_index, children) -> permutation of range(K)``.
    """
    K = h.K
    order = [np.zeros(1, dtype=np.int64)]
    for l in range(h.depth):
        nxt = np.empty(K ** (l + 1), dtype=np.int64)
        for j, old in enumerate(order[-1]):
            kids = old * K + np.arange(K)
            perm = np.asarray(slot_perm(l, old, h.levels[l + 1][kids]))
            nxt[j * K:(j + 1) * K] = kids[perm]
        order.append(nxt)
    levels = [h.levels[l][order[l]] for l in range(h.depth + 1)]
    return Hierarchy(h.d, h.K, h.s, h.root, levels, h.generator_tag), order


def canonicalize_children(h: Hierarchy, L_fit: int | None = None) -> Canonicalization:
    """Reorder every parent's children by PCA-plane polar angle.

    The plane is fitted on the centroids of levels 0..L_fit (all levels by default).
    """
    L_fit = h.depth if L_fit is None else L_fit
    if h.depth < 1:
        raise ValueError("canonicalization needs at least two observed levels")
    basis, fallback = pca_plane(h.all_nodes(L_fit))
    notes = ["covariance rank-deficient; using coordinate axes"] if fallback else []
    if fallback:
        log.info("canonicalize_children: %s", notes[0])

    def perm(l, old, kids):
        return child_order(h.levels[l][old], kids, basis)

    out, order = reorder(h, perm)
    return Canonicalization(out, order, basis, fallback, notes)


def permute_children(h: Hierarchy, rng: np.random.Generator) -> Hierarchy:
    """Independent random slot permutation under every parent, subtrees moving along."""
    return reorder(h, lambda l, old, kids: rng.permutation(h.K))[0]
