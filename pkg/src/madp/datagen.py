"""Synthetic logistic-regression data attached to hyperedges.

Each edge i carries a feature vector f_i and a label

    y_i ~ Bernoulli(sigmoid(s * <w_i, f_i>)),  w_i = 2/(1+beta) * (a + beta*|e_i|*b)

where a (shared base vector) and b (arity bias vector) are drawn once.  Edges
attributed to more users therefore follow a different, typically
"higher-signal", labelling rule, which is what makes contribution bounding
biased.  Ground truth, features and labels are drawn from zero-mean Gaussians
with covariance c*I, c = 1/sqrt(d) (``cov='sqrt'``) or 1/d (``cov='inv'``).
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np
from scipy import special

from .hypergraph import Hypergraph

TRAIN, TEST, VALIDATION = 0, 1, 2
SPLIT_NAMES = {TRAIN: 'train', TEST: 'test', VALIDATION: 'validation'}

MAGIC = b'MADP'
VERSION = 1
_HEADER = struct.Struct('<4sIIQ')

_BLOCK = 4096
_TRUTH_STREAM, _EXAMPLE_STREAM, _SPLIT_STREAM = 11, 12, 13


@dataclasses.dataclass(frozen=True)
class RegressionSpec:
    dim: int = 100
    steepness: float = 20.0
    bias_scale: float = 1.0
    seed: int = 0
    cov: str = 'inv'

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f'dim must be >= 1, got {self.dim}')
        if not self.steepness > 0:
            raise ValueError('steepness must be positive')
        if not self.bias_scale > 0:
            raise ValueError('bias_scale must be positive')
        if self.cov not in ('sqrt', 'inv'):
            raise ValueError(f"cov must be 'sqrt' or 'inv', got {self.cov!r}")

    @property
    def variance(self) -> float:
        return self.dim ** -0.5 if self.cov == 'sqrt' else 1.0 / self.dim


@dataclasses.dataclass
class RegressionDataset:
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray  # (n,) uint8
    arity: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) uint8, TRAIN / TEST / VALIDATION
    base: np.ndarray | None = None
    bias: np.ndarray | None = None
    spec: RegressionSpec | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def effective_weights(self, arity: np.ndarray | int) -> np.ndarray:
        """Per-arity generating parameter vectors (rows), before steepness."""
        if self.base is None or self.spec is None:
            raise ValueError('dataset carries no ground truth')
        beta = self.spec.bias_scale
        arity = np.atleast_1d(np.asarray(arity, dtype=float))
        return 2.0 / (1.0 + beta) * (self.base[None, :] + beta * arity[:, None] * self.bias[None, :])

    def label_probability(self, idx: np.ndarray | None = None) -> np.ndarray:
        """P(y=1) under the generating model for the given edges."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        w = self.effective_weights(self.arity[idx])
        logits = self.spec.steepness * np.einsum('ij,ij->i', w, self.features[idx].astype(float))
        return special.expit(logits)


def _rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, block, stream]))


def gen_regression(h: Hypergraph, spec: RegressionSpec) -> RegressionDataset:
    """Draws ground truth, features and labels for every edge of `h`, then splits."""
    if h.num_edges == 0:
        raise ValueError('hypergraph has no edges')
    d = spec.dim
    std = spec.variance ** 0.5
    truth = _rng(spec.seed, 0, _TRUTH_STREAM)
    base = truth.normal(0.0, std, d)
    bias = truth.normal(0.0, std, d)

    n = h.num_edges
    arity = h.arity.copy()
    features = np.empty((n, d), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    scale = 2.0 / (1.0 + spec.bias_scale)
    for block, start in enumerate(range(0, n, _BLOCK)):
        stop = min(n, start + _BLOCK)
        rng = _rng(spec.seed, block, _EXAMPLE_STREAM)
        f = rng.normal(0.0, std, (stop - start, d)).astype(np.float32)
        w = scale * (base[None, :] + spec.bias_scale * arity[start:stop, None] * bias[None, :])
        prob = special.expit(spec.steepness * np.einsum('ij,ij->i', w, f.astype(float)))
        labels[start:stop] = rng.random(stop - start) < prob
        features[start:stop] = f
    ds = RegressionDataset(features, labels, arity, np.zeros(n, dtype=np.uint8), base, bias, spec)
    return split_dataset(ds, spec.seed)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, test, validation): test and validation get floor(n/10) each."""
    held = n // 10
    return n - 2 * held, held, held


def split_dataset(ds: RegressionDataset, seed: int) -> RegressionDataset:
    """Uniformly random 80/10/10 partition of the edges (returns a new dataset)."""
    n = len(ds)
    n_train, n_test, _ = split_sizes(n)
    perm = _rng(seed, 0, _SPLIT_STREAM).permutation(n)
    split = np.full(n, VALIDATION, dtype=np.uint8)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train:n_train + n_test]] = TEST
    return dataclasses.replace(ds, split=split)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([('f', '<f4', (d,)), ('y', 'u1'), ('arity', '<u4'), ('split', 'u1')])


def save_dataset(ds: RegressionDataset, path):
    """Binary little-endian file: header then one packed record per edge."""
    d = ds.dim
    rec = np.empty(len(ds), dtype=_record_dtype(d))
    rec['f'] = ds.features
    rec['y'] = ds.labels
    rec['arity'] = ds.arity
    rec['split'] = ds.split
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(MAGIC, VERSION, d, len(ds)))
        f.write(rec.tobytes())


def load_dataset(path) -> RegressionDataset:
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f'{path}: truncated header')
    magic, version, d, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f'{path}: bad magic {magic!r}')
    if version != VERSION:
        raise ValueError(f'{path}: unsupported version {version}')
    dtype = _record_dtype(d)
    if len(raw) != _HEADER.size + n * dtype.itemsize:
        raise ValueError(f'{path}: expected {n} records of {dtype.itemsize} bytes')
    rec = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size, count=n)
    return RegressionDataset(
        features=np.array(rec['f'], dtype=np.float32),
        labels=np.array(rec['y'], dtype=np.uint8),
        arity=np.array(rec['arity'], dtype=np.int64),
        split=np.array(rec['split'], dtype=np.uint8),
    )
