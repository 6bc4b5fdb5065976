"""Synthetic attribution hypergraphs.

Two models, both parameterized by the number of edges, the expected edge
arity and the expected user degree (which fix the number of users):

* regular: each edge draws an arity and then that many distinct users
  uniformly at random;
* skewed: edges are built one at a time and user j joins the current edge
  independently with probability  rate * (1 + deg_j)^alpha / sum_j' (1 + deg_j')^alpha,
  a preferential-attachment rule that yields a heavy-tailed degree profile.

Every edge must have at least one user.  Under the default ``calibrated``
policy the Poisson rate is lowered so that the zero-truncated arity still
has mean `expected_arity`; under ``resample`` the nominal rate is used and
empty draws are redrawn (which inflates the mean arity).

Randomness comes from Philox streams keyed by (seed, block of 4096 edges),
so the output does not depend on how blocks are scheduled.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import optimize

from .hypergraph import Hypergraph

BLOCK = 4096
_REGULAR_STREAM = 1
_SKEWED_STREAM = 2


@dataclasses.dataclass(frozen=True)
class GraphGenSpec:
    num_edges: int
    expected_arity: float = 2.0
    expected_degree: float = 2.0
    skew_alpha: float = 1.5
    seed: int = 0
    zero_policy: str = 'calibrated'  # or 'resample'

    def __post_init__(self):
        if self.num_edges < 0:
            raise ValueError('num_edges must be non-negative')
        if not (self.expected_arity > 0 and self.expected_degree > 0):
            raise ValueError('expected_arity and expected_degree must be positive')
        if self.skew_alpha < 0:
            raise ValueError('skew_alpha must be non-negative')
        if not 0 <= self.seed < 2**64:
            raise ValueError('seed must be a 64-bit unsigned integer')
        if self.zero_policy not in ('calibrated', 'resample'):
            raise ValueError(f'unknown zero_policy {self.zero_policy!r}')

    @property
    def num_users(self) -> int:
        return round(self.num_edges * self.expected_arity / self.expected_degree)


def _block_rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, block, stream]))


def truncated_poisson_rate(mean: float) -> float:
    """Rate lam with lam / (1 - exp(-lam)) == mean (zero-truncated Poisson).

    Requires mean >= 1; mean == 1 gives the degenerate rate 0 (arity always 1).
    """
    if mean < 1:
        raise ValueError(f'a non-empty edge cannot have mean arity {mean} < 1')
    if mean == 1:
        return 0.0
    return optimize.brentq(lambda lam: lam / -math.expm1(-lam) - mean, 1e-12, mean)


def _rate(spec: GraphGenSpec) -> float:
    if spec.zero_policy == 'resample':
        return spec.expected_arity
    return truncated_poisson_rate(spec.expected_arity)


def _check_users(spec: GraphGenSpec) -> int:
    m = spec.num_users
    if m < 1:
        raise ValueError(f'derived user count {m} < 1 for {spec}')
    return m


def _draw_arities(rng: np.random.Generator, rate: float, n: int, m: int) -> np.ndarray:
    if rate == 0:
        return np.ones(n, dtype=np.int64)
    ar = rng.poisson(rate, n)
    zero = ar == 0
    while zero.any():
        ar[zero] = rng.poisson(rate, int(zero.sum()))
        zero = ar == 0
    return np.minimum(ar, m)


def gen_regular(spec: GraphGenSpec) -> Hypergraph:
    """Probabilistic regular hypergraph (Poisson arity, uniform users)."""
    m = _check_users(spec)
    rate = _rate(spec)
    edges: list[tuple[int, ...]] = []
    for block, start in enumerate(range(0, spec.num_edges, BLOCK)):
        n = min(BLOCK, spec.num_edges - start)
        rng = _block_rng(spec.seed, block, _REGULAR_STREAM)
        ar = _draw_arities(rng, rate, n, m)
        flat = rng.integers(0, m, int(ar.sum()))
        offsets = np.concatenate(([0], np.cumsum(ar)))
        for i in range(n):
            users = set(flat[offsets[i]:offsets[i + 1]].tolist())
            if len(users) < ar[i]:
                users = set(rng.choice(m, int(ar[i]), replace=False).tolist())
            edges.append(tuple(sorted(users)))
    return Hypergraph(m, tuple(edges))


_HOT_DEGREE = 64


class _SkewState:
    """Inclusion classes for the skewed model.

    Slots below `_HOT_DEGREE` are degree levels holding every user of that
    degree (same degree, same inclusion probability); each user that reaches
    `_HOT_DEGREE` gets a slot of its own.  `count[j]` users sit in slot j and
    each carries weight `weight[j]`.
    """

    def __init__(self, m: int, alpha: float):
        self.alpha = alpha
        self.members: list[list[int]] = [list(range(m))] + [[] for _ in range(_HOT_DEGREE - 1)]
        self.pos = np.arange(m)
        self.count = np.zeros(_HOT_DEGREE, dtype=np.int64)
        self.count[0] = m
        self.weight = (1.0 + np.arange(_HOT_DEGREE)) ** alpha
        self.hot_users: list[int] = []
        self.hot_deg: list[int] = []
        self.total_weight = float(m)
        self.max_weight = 1.0

    def promote(self, u: int, d: int):
        bucket = self.members[d]
        i = self.pos[u]
        last = bucket.pop()
        if last != u:
            bucket[i] = last
            self.pos[last] = i
        self.count[d] -= 1
        if d + 1 < _HOT_DEGREE:
            self.pos[u] = len(self.members[d + 1])
            self.members[d + 1].append(u)
            self.count[d + 1] += 1
        else:
            self.hot_users.append(u)
            self.hot_deg.append(d + 1)
            self.count = np.append(self.count, 1)
            self.weight = np.append(self.weight, (2.0 + d) ** self.alpha)
        w_new = (2.0 + d) ** self.alpha
        self.total_weight += w_new - self.weight[d]
        self.max_weight = max(self.max_weight, w_new)

    def promote_hot(self, j: int):
        d = self.hot_deg[j]
        self.hot_deg[j] = d + 1
        new = (2.0 + d) ** self.alpha
        self.total_weight += new - self.weight[_HOT_DEGREE + j]
        self.weight[_HOT_DEGREE + j] = new
        self.max_weight = max(self.max_weight, new)


def gen_skewed(spec: GraphGenSpec) -> Hypergraph:
    """Preferential-attachment hypergraph (sequential, degree feedback).

    Independent Bernoulli(p_j) inclusions are drawn as a Poisson process: user
    j receives Poisson(-log(1 - p_j)) points and joins the edge iff it gets at
    least one.  Users sharing a slot share p_j, so points are placed by slot
    mass and then uniformly within the slot.
    """
    m = _check_users(spec)
    rate = _rate(spec)
    st = _SkewState(m, spec.skew_alpha)
    edges: list[tuple[int, ...]] = []
    rng = None
    for i in range(spec.num_edges):
        if i % BLOCK == 0:
            rng = _block_rng(spec.seed, i // BLOCK, _SKEWED_STREAM)
        if rate == 0:
            picks = _single_pick(rng, st)
        else:
            picks = _poisson_picks(rng, st, rate)
        users = []
        for j, t in picks:
            if j >= _HOT_DEGREE:
                users.append(st.hot_users[j - _HOT_DEGREE])
                st.promote_hot(j - _HOT_DEGREE)
        level_picks = [(st.members[j][t], j) for j, t in picks if j < _HOT_DEGREE]
        for u, d in level_picks:
            users.append(u)
            st.promote(u, d)
        edges.append(tuple(sorted(users)))
    return Hypergraph(m, tuple(edges))


def _poisson_picks(rng, st: _SkewState, rate: float) -> list[tuple[int, int]]:
    """Distinct (slot, member index) pairs of one non-empty edge."""
    scale = rate / st.total_weight
    # Empty degree levels keep their weight but must not contribute.
    p = np.where(st.count > 0, st.weight * scale, 0.0)
    forced: set[tuple[int, int]] = set()
    if st.max_weight * scale >= 1:
        # Capped probabilities: those users always join.
        for j in np.flatnonzero(p >= 1).tolist():
            forced.update((j, t) for t in range(int(st.count[j])))
        p = np.where(p >= 1, 0.0, p)
    cum = np.cumsum(st.count * -np.log1p(-p))
    total = cum[-1]
    while True:
        n = int(rng.poisson(total))
        if n == 0:
            if forced:
                return sorted(forced)
            continue
        slots = np.searchsorted(cum, rng.random(n) * total, side='right')
        members = (rng.random(n) * st.count[slots]).astype(np.int64)
        return sorted(forced.union(zip(slots.tolist(), members.tolist())))


def _single_pick(rng, st: _SkewState) -> list[tuple[int, int]]:
    # Degenerate arity-1 model: one user with probability proportional to weight.
    cum = np.cumsum(st.count * st.weight)
    j = int(np.searchsorted(cum, rng.random() * cum[-1], side='right'))
    return [(j, int(rng.integers(st.count[j])))]


def generate(spec: GraphGenSpec, model: str) -> Hypergraph:
    if model == 'regular':
        return gen_regular(spec)
    if model == 'skewed':
        return gen_skewed(spec)
    raise ValueError(f'unknown graph model {model!r}')


def degree_histogram(h: Hypergraph) -> dict[int, int]:
    """degree -> number of users with that degree (users of degree 0 included)."""
    if h.num_users == 0:
        return {}
    values, counts = np.unique(h.degree_index, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}
