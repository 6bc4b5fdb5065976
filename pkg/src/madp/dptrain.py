"""DP-SGD and banded DP-MF training of a logistic-regression model.

Each step computes per-example gradients of the cross-entropy loss, clips
them to `clip_norm`, averages over the *target* batch size B and adds noise
``clip_norm * sigma / B * (C^{-1} z)_i``.  DP-SGD uses C = I with Poisson
sampling; DP-MF iterates a fixed schedule of batches and correlates noise
across steps through a b-banded lower-triangular strategy matrix C, whose
inverse is applied on the fly by forward substitution.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, optimize, signal, special

from .datagen import RegressionDataset
from .hypergraph import Schedule, Selection

_SAMPLE_STREAM, _NOISE_STREAM = 21, 22
MODEL_MAGIC = b'MADM'
_MODEL_HEADER = struct.Struct('<4sI')
TRAJECTORY_HEADER = ('step', 'loss', 'accuracy', 'sigma', 'grad_norm_mean')


@dataclasses.dataclass
class Model:
    weights: np.ndarray
    intercept: float = 0.0

    @classmethod
    def zeros(cls, d: int) -> 'Model':
        return cls(np.zeros(d), 0.0)

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.weights, self.intercept)

    @classmethod
    def from_theta(cls, theta: np.ndarray) -> 'Model':
        return cls(np.array(theta[:-1], dtype=float), float(theta[-1]))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights + self.intercept

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self.logits(features))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    learning_rate: float = 1e-3
    optimizer: str = 'adam'
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 0  # 0: log only the final step

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError('steps must be >= 0 and batch_size >= 1')
        if not self.clip_norm > 0:
            raise ValueError('clip_norm must be positive')
        if self.noise_multiplier < 0:
            raise ValueError('noise_multiplier must be non-negative')
        if self.optimizer not in ('sgd', 'adam'):
            raise ValueError(f'unknown optimizer {self.optimizer!r}')

    @property
    def noise_scale(self) -> float:
        if self.noise_multiplier == 0:
            return 0.0
        return self.clip_norm * self.noise_multiplier / self.batch_size


# ---------------------------------------------------------------------------
# Gradients.


def _augment(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    return np.concatenate([f, np.ones(f.shape[:-1] + (1,))], axis=-1)


def loss_grad(model: Model, features: np.ndarray, label: float) -> np.ndarray:
    """Unclipped cross-entropy gradient w.r.t. (weights, intercept)."""
    x = _augment(features)
    r = special.expit(x @ model.theta) - label
    return r * x


def clip(v: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm <= clip_norm:
        return v
    return v * (clip_norm / norm)


def clipped_grad(model: Model, features: np.ndarray, label: float, clip_norm: float) -> np.ndarray:
    return clip(loss_grad(model, features, label), clip_norm)


def _clipped_sum(theta: np.ndarray, X: np.ndarray, y: np.ndarray, clip_norm: float) -> tuple[np.ndarray, float]:
    """Sum of clipped per-example gradients, and the mean unclipped norm.

    Every per-example gradient is r_i * [x_i, 1] with r_i = sigmoid - y, so
    norms and clipping factors are computed without materializing them.
    """
    if len(y) == 0:
        return np.zeros_like(theta), 0.0
    r = special.expit(X @ theta[:-1] + theta[-1]) - y
    norms = np.abs(r) * np.sqrt(np.einsum('ij,ij->i', X, X) + 1.0)
    with np.errstate(divide='ignore'):
        factor = np.minimum(1.0, clip_norm / norms)
    coef = r * factor
    return np.append(X.T @ coef, coef.sum()), float(norms.mean())


# ---------------------------------------------------------------------------
# Strategy matrices and correlated noise.


@dataclasses.dataclass
class StrategyMatrix:
    """b-banded lower-triangular C stored by column: coefs[j, l] = C[j + l, j]."""

    coefs: np.ndarray  # (T, b)

    def __post_init__(self):
        self.coefs = np.asarray(self.coefs, dtype=float)
        if self.coefs.ndim != 2 or self.coefs.shape[1] < 1:
            raise ValueError('coefs must have shape (T, b)')
        if not np.all(self.coefs[:, 0] > 0):
            raise ValueError('diagonal entries must be positive')

    @property
    def steps(self) -> int:
        return self.coefs.shape[0]

    @property
    def band(self) -> int:
        return self.coefs.shape[1]

    @classmethod
    def identity(cls, T: int) -> 'StrategyMatrix':
        return cls(np.ones((T, 1)))

    @classmethod
    def from_toeplitz(cls, T: int, c: Sequence[float]) -> 'StrategyMatrix':
        """Column-normalized banded Toeplitz matrix with first column c (len b)."""
        c = np.asarray(c, dtype=float)
        b = len(c)
        coefs = np.tile(c, (T, 1))
        # Entries below row T-1 do not exist.
        for j in range(max(0, T - b + 1), T):
            coefs[j, T - j:] = 0.0
        return cls(_normalize(coefs))

    @classmethod
    def from_dense(cls, C: np.ndarray, b: int) -> 'StrategyMatrix':
        T = C.shape[0]
        coefs = np.zeros((T, b))
        for j in range(T):
            for l in range(min(b, T - j)):
                coefs[j, l] = C[j + l, j]
        return cls(coefs)

    def dense(self) -> np.ndarray:
        T, b = self.coefs.shape
        C = np.zeros((T, T))
        for l in range(min(b, T)):
            idx = np.arange(T - l)
            C[idx + l, idx] = self.coefs[:T - l, l]
        return C

    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.coefs, axis=1)


def _normalize(coefs: np.ndarray) -> np.ndarray:
    return coefs / np.linalg.norm(coefs, axis=1, keepdims=True)


def factorization_error(C: StrategyMatrix) -> float:
    """||A C^{-1}||_F^2 for the prefix-sum workload A (all-ones lower triangle)."""
    Cinv = linalg.solve_triangular(C.dense(), np.eye(C.steps), lower=True)
    return float(np.sum(np.cumsum(Cinv, axis=0) ** 2))


def toeplitz_error(n: int, c: Sequence[float]) -> float:
    """factorization_error of StrategyMatrix.from_toeplitz(n, c), in O(n^2).

    Before normalization C is Toeplitz, so its inverse is Toeplitz with the
    power-series inverse h of c as first column.  Normalizing column j by
    r_j scales row j of the inverse by r_j.
    """
    c = np.asarray(c, dtype=float)
    impulse = np.zeros(n)
    impulse[0] = 1.0
    h = signal.lfilter([1.0], c, impulse)
    r = np.full(n, np.linalg.norm(c))
    for j in range(max(0, n - len(c) + 1), n):
        r[j] = np.linalg.norm(c[:n - j])
    M = np.tril(linalg.toeplitz(h)) * r[:, None]
    return float(np.sum(np.cumsum(M, axis=0) ** 2))


OPTIMIZE_MAX_STEPS = 512


def build_strategy(T: int, b: int, mode: str = 'optimized', sweeps: int = 4) -> StrategyMatrix:
    """Banded strategy; `optimized` minimizes the prefix-sum factorization error.

    The b Toeplitz coefficients (first fixed to 1) are tuned by coordinate
    descent with a scalar minimizer per coordinate, starting from the
    identity.  For T above OPTIMIZE_MAX_STEPS the coefficients are tuned at
    OPTIMIZE_MAX_STEPS and reused.
    """
    if not 1 <= b <= T:
        raise ValueError(f'need 1 <= b <= T, got b={b}, T={T}')
    if mode not in ('identity', 'optimized'):
        raise ValueError(f'unknown mode {mode!r}')
    if mode == 'identity' or b == 1:
        return StrategyMatrix.identity(T)
    n = min(T, OPTIMIZE_MAX_STEPS)
    c = np.zeros(b)
    c[0] = 1.0

    def objective(c_):
        with np.errstate(over='ignore', invalid='ignore'):
            val = toeplitz_error(n, c_)
        return val if np.isfinite(val) else math.inf

    best = objective(c)
    for _ in range(sweeps):
        start = best
        for i in range(1, b):
            def f(v, i=i):
                trial = c.copy()
                trial[i] = v
                return objective(trial)
            res = optimize.minimize_scalar(f, bracket=(c[i] - 0.5, c[i] + 0.5), tol=1e-6)
            if res.fun < best:
                best = float(res.fun)
                c[i] = res.x
        if start - best <= 1e-9 * start:
            break
    return StrategyMatrix.from_toeplitz(T, c)


def _noise_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, step, _NOISE_STREAM]))


class NoiseStream:
    """Streams (C^{-1} z)_i by solving C out = z one row at a time.

    Only the last b-1 outputs are kept.  z_i is standard normal of length
    `dims`, drawn from a stream keyed by (seed, i).
    """

    def __init__(self, C: StrategyMatrix, dims: int, seed: int, z: np.ndarray | None = None):
        self.C = C
        self.dims = dims
        self.seed = seed
        self.step = 0
        self._z = z
        self._ring: list[np.ndarray] = []  # outputs of steps i-1, i-2, ... (newest first)

    def base(self, i: int) -> np.ndarray:
        if self._z is not None:
            return np.asarray(self._z[i], dtype=float)
        return _noise_rng(self.seed, i).standard_normal(self.dims)

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        i = self.step
        if i >= self.C.steps:
            raise StopIteration
        coefs = self.C.coefs
        acc = self.base(i)
        for l, prev in enumerate(self._ring, start=1):
            acc = acc - coefs[i - l, l] * prev
        out = acc / coefs[i, 0]
        if self.C.band > 1:
            self._ring.insert(0, out)
            del self._ring[self.C.band - 1:]
        self.step += 1
        return out


def correlated_noise(C: StrategyMatrix, sigma: float, scale: float, dims: int, seed: int) -> Iterable[np.ndarray]:
    """Per-step noise vectors `scale * (C^{-1} z)_i` (scale = clip_norm * sigma / B).

    `sigma` is carried for bookkeeping only; callers fold it into `scale`.
    """
    del sigma
    for out in NoiseStream(C, dims, seed):
        yield scale * out


# ---------------------------------------------------------------------------
# Training loops.


@dataclasses.dataclass
class TrainResult:
    model: Model
    trajectory: list[dict]


class _Optimizer:
    def __init__(self, cfg: TrainConfig, dim: int):
        self.cfg = cfg
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def update(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.optimizer == 'sgd':
            return theta - cfg.learning_rate * g
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _run(X: np.ndarray, y: np.ndarray, batches: Iterable[np.ndarray], cfg: TrainConfig,
         C: StrategyMatrix, eval_data: tuple[np.ndarray, np.ndarray] | None) -> TrainResult:
    d = X.shape[1]
    theta = np.zeros(d + 1)
    opt = _Optimizer(cfg, d + 1)
    noise = NoiseStream(C, d + 1, cfg.seed) if cfg.noise_scale > 0 else None
    scale = cfg.noise_scale
    trajectory = []
    for step, idx in enumerate(batches, start=1):
        g, gnorm = _clipped_sum(theta, X[idx], y[idx], cfg.clip_norm)
        g = g / cfg.batch_size
        if noise is not None:
            g = g + scale * next(noise)
        theta = opt.update(theta, g)
        if (cfg.log_every and step % cfg.log_every == 0) or step == cfg.steps:
            row = {'step': step, 'loss': math.nan, 'accuracy': math.nan,
                   'sigma': cfg.noise_multiplier, 'grad_norm_mean': gnorm}
            if eval_data is not None and len(eval_data[1]):
                row['loss'], row['accuracy'] = _metrics(theta, *eval_data)
            trajectory.append(row)
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError('training diverged (non-finite parameters)')
    return TrainResult(Model.from_theta(theta), trajectory)


def _sample_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, step, _SAMPLE_STREAM]))


def poisson_batches(n: int, p: float, steps: int, seed: int) -> Iterable[np.ndarray]:
    """Positions in [0, n) included independently with probability p, per step.

    The batch size is Binomial(n, p) and, given its size, the batch is a
    uniform subset; positions come out sorted.
    """
    for step in range(steps):
        if p >= 1:
            yield np.arange(n)
            continue
        rng = _sample_rng(seed, step)
        m = int(rng.binomial(n, p))
        yield np.sort(rng.choice(n, m, replace=False))


def _train_arrays(ds: RegressionDataset) -> np.ndarray:
    return np.asarray(ds.features, dtype=float)


def dpsgd_train(ds: RegressionDataset, selection: Selection, cfg: TrainConfig,
                eval_split: int | None = None, batches: Sequence[Sequence[int]] | None = None) -> TrainResult:
    """DP-SGD on the multiset `selection` of dataset rows.

    Each step includes every copy of every selected row independently with
    probability p = B / |S| (capped at 1).  If `batches` (lists of dataset
    rows) is given they are used in order instead of sampling.
    """
    if selection.total == 0:
        raise ValueError('empty selection')
    X_all = _train_arrays(ds)
    y_all = ds.labels.astype(float)
    eval_data = _eval_arrays(ds, eval_split, X_all, y_all)
    if batches is not None:
        it = (np.asarray(b, dtype=np.int64) for b in batches[:cfg.steps])
        return _run(X_all, y_all, it, cfg, StrategyMatrix.identity(max(cfg.steps, 1)), eval_data)
    rows = selection.expanded()
    X, y = X_all[rows], y_all[rows]
    p = min(1.0, cfg.batch_size / len(rows))
    it = poisson_batches(len(rows), p, cfg.steps, cfg.seed)
    return _run(X, y, it, cfg, StrategyMatrix.identity(max(cfg.steps, 1)), eval_data)


def dpmf_train(ds: RegressionDataset, schedule: Schedule, cfg: TrainConfig, C: StrategyMatrix,
               eval_split: int | None = None, min_sep: int | None = None) -> TrainResult:
    """DP-MF over the schedule's batches in order, with noise correlated by C."""
    if schedule.num_batches > C.steps:
        raise ValueError(f'schedule has {schedule.num_batches} batches but C covers {C.steps} steps')
    if min_sep is not None and C.band > min_sep:
        raise ValueError(f'strategy band {C.band} exceeds the schedule min-sep {min_sep}')
    if cfg.steps != schedule.num_batches:
        cfg = dataclasses.replace(cfg, steps=schedule.num_batches)
    X_all = _train_arrays(ds)
    y_all = ds.labels.astype(float)
    eval_data = _eval_arrays(ds, eval_split, X_all, y_all)
    it = (np.asarray(b, dtype=np.int64) for b in schedule.batches)
    return _run(X_all, y_all, it, cfg, C, eval_data)


def train_nonprivate(X: np.ndarray, y: np.ndarray, steps: int, learning_rate: float,
                     optimizer: str = 'sgd', batch_size: int | None = None) -> Model:
    """Plain full-batch gradient descent on the mean loss (reference trainer)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    B = len(y) if batch_size is None else batch_size
    cfg = TrainConfig(steps=steps, batch_size=B, clip_norm=math.inf, learning_rate=learning_rate,
                      optimizer=optimizer)
    theta = np.zeros(X.shape[1] + 1)
    opt = _Optimizer(cfg, len(theta))
    for _ in range(steps):
        r = special.expit(X @ theta[:-1] + theta[-1]) - y
        g = np.append(X.T @ r, r.sum()) / B
        theta = opt.update(theta, g)
    return Model.from_theta(theta)


# ---------------------------------------------------------------------------
# Evaluation and I/O.


def _metrics(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    z = X @ theta[:-1] + theta[-1]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    acc = float(np.mean((z >= 0) == (y == 1)))
    return loss, acc


def _eval_arrays(ds, split, X_all, y_all):
    if split is None:
        return None
    idx = ds.indices(split)
    return X_all[idx], y_all[idx]


def evaluate(model: Model, ds: RegressionDataset, split: int) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (predict 1 iff probability >= 0.5)."""
    idx = ds.indices(split)
    if len(idx) == 0:
        raise ValueError('empty split')
    return _metrics(model.theta, np.asarray(ds.features[idx], dtype=float), ds.labels[idx].astype(float))


def save_model(model: Model, path):
    w = np.asarray(model.weights, dtype='<f8')
    with open(path, 'wb') as f:
        f.write(_MODEL_HEADER.pack(MODEL_MAGIC, len(w)))
        f.write(w.tobytes())
        f.write(struct.pack('<d', model.intercept))


def load_model(path) -> Model:
    with open(path, 'rb') as f:
        raw = f.read()
    magic, d = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ValueError(f'{path}: bad magic {magic!r}')
    if len(raw) != _MODEL_HEADER.size + 8 * (d + 1):
        raise ValueError(f'{path}: truncated model file')
    w = np.frombuffer(raw, dtype='<f8', count=d, offset=_MODEL_HEADER.size).copy()
    (b,) = struct.unpack_from('<d', raw, _MODEL_HEADER.size + 8 * d)
    return Model(w, b)


def save_trajectory(rows: Sequence[dict], path):
    with open(path, 'w', newline='') as f:
        w = csv.DictWriter(f, fieldnames=TRAJECTORY_HEADER, lineterminator='\n')
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in TRAJECTORY_HEADER})
