"""Privacy accounting and noise calibration.

Two routes are supported:

* DP-MF with a (k, b)-min-sep schedule is a plain Gaussian mechanism whose
  sensitivity is sqrt(k) for a unit-column-norm strategy, so the exact analytic
  Gaussian calibration applies.
* DP-SGD with Poisson sampling is accounted with the Renyi-DP bound of the
  subsampled Gaussian, converted to (epsilon, delta), and lifted from one
  example to k examples with the generic group-privacy argument.  This is
  sound but looser than a dedicated group-level accountant; tighter noise
  multipliers can be supplied through a CSV table (see
  `load_external_noise_table`).

All RDP bounds are for add/remove (zero-out) adjacency with sensitivity 1.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy import special

# Large orders matter for tiny delta (log(1/delta) / (alpha - 1) must be small).
DEFAULT_ORDERS: tuple[float, ...] = ((1.25, 1.5) + tuple(float(a) for a in range(2, 65))
                                     + (80.0, 96.0, 128.0, 160.0, 192.0, 256.0, 320.0, 384.0, 512.0,
                                        768.0, 1024.0, 1536.0, 2048.0, 3072.0, 4096.0))

NOISE_TABLE_HEADER = ("epsilon", "delta", "k", "p", "steps", "sigma")

_MAX_SIGMA = 1e4


class InfeasibleCalibration(ValueError):
    """No noise multiplier up to the search limit meets the budget."""


@dataclasses.dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    # Set by group_lift when the lifted delta overflows or reaches 1.
    saturated: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f'epsilon must be non-negative, got {self.epsilon}.')
        upper_ok = self.delta <= 1 if self.saturated else self.delta < 1
        if not (0 < self.delta and upper_ok):
            raise ValueError(f'delta must be in (0, 1), got {self.delta}.')


@dataclasses.dataclass(frozen=True)
class MechanismSpec:
    """Parameters of a DP training mechanism as seen by the accountant."""
    kind: str  # 'dpsgd_poisson' or 'dpmf_minsep'
    sigma: float
    steps: int
    sampling_prob: float = 1.0
    group_k: int = 1
    band_b: int = 1

    def __post_init__(self):
        if self.kind not in ('dpsgd_poisson', 'dpmf_minsep'):
            raise ValueError(f'unknown mechanism kind {self.kind!r}')
        if not 0 < self.sampling_prob <= 1:
            raise ValueError('sampling_prob must be in (0, 1]')
        if not self.sigma > 0:
            raise ValueError('sigma must be positive')
        if self.group_k < 1:
            raise ValueError('group_k must be >= 1')


# ---------------------------------------------------------------------------
# Analytic Gaussian mechanism.


def _log_delta(epsilon: float, sigma: float) -> float:
    # log of Phi(a) - e^eps Phi(b), evaluated without cancellation.
    a = 1.0 / (2 * sigma) - epsilon * sigma
    b = -1.0 / (2 * sigma) - epsilon * sigma
    x = special.log_ndtr(a)
    y = epsilon + special.log_ndtr(b)
    if y >= x:
        return -math.inf
    return float(x + np.log1p(-np.exp(y - x)))


def analytic_gaussian_delta(epsilon: float, sigma: float) -> float:
    """Exact delta(epsilon) of the sensitivity-1 Gaussian mechanism.

    delta = Phi(1/(2 sigma) - eps sigma) - e^eps Phi(-1/(2 sigma) - eps sigma).
    """
    if not sigma > 0:
        raise ValueError(f'sigma must be positive, got {sigma}.')
    if epsilon < 0:
        raise ValueError(f'epsilon must be non-negative, got {epsilon}.')
    return math.exp(_log_delta(epsilon, sigma))


def calibrate_sigma_gaussian(budget: PrivacyBudget, sensitivity: float = 1.0) -> float:
    """Smallest noise std of a Gaussian mechanism meeting `budget`.

    Bisection in log-space; the returned value is always on the feasible side
    and within a relative 1e-12 of the boundary.
    """
    if not sensitivity > 0:
        raise ValueError(f'sensitivity must be positive, got {sensitivity}.')
    log_target = math.log(budget.delta)
    eps = budget.epsilon

    lo, hi = 1e-2, 1.0
    while _log_delta(eps, lo) <= log_target:
        lo /= 10
    while _log_delta(eps, hi) > log_target:
        lo, hi = hi, hi * 10
    while hi / lo - 1 > 1e-12:
        mid = math.sqrt(lo * hi)
        if _log_delta(eps, mid) <= log_target:
            hi = mid
        else:
            lo = mid
    return hi * sensitivity


def calibrate_sigma_dpmf(budget: PrivacyBudget, k: int) -> float:
    """Noise multiplier for BandMF over a (k, b)-min-sep schedule.

    With unit column norms the mechanism is Gaussian with sensitivity sqrt(k).
    """
    if k < 1:
        raise ValueError('k must be >= 1')
    return calibrate_sigma_gaussian(budget, math.sqrt(k))


# ---------------------------------------------------------------------------
# RDP of the Poisson-subsampled Gaussian.


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    return max(a, b) + math.log1p(math.exp(-abs(a - b)))


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if a <= b:
        # Only reachable through rounding in the tails of the series.
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    return math.log(2) + float(special.log_ndtr(-x * math.sqrt(2)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=float)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Two-sided series split at z0; the standard series for the sampled Gaussian mechanism.
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30:
            break
    return _log_add(log_a0, log_a1)


def _rdp_single(q: float, sigma: float, alpha: float) -> float:
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1)


def rdp_subsampled_gaussian(
        sigma: float,
        p: float,
        steps: int,
        orders: Sequence[float] = DEFAULT_ORDERS,
) -> np.ndarray:
    """Per-order RDP of `steps` compositions of the Poisson-subsampled Gaussian.

    Args:
        sigma: Noise multiplier (noise std divided by the L2 sensitivity).
        p: Poisson sampling probability in (0, 1].
        steps: Number of compositions.
        orders: Renyi orders, all > 1.

    Returns:
        Array of RDP epsilons aligned with `orders`.
    """
    if not 0 < p <= 1:
        raise ValueError(f'p must be in (0, 1], got {p}.')
    if not sigma > 0:
        raise ValueError(f'sigma must be positive, got {sigma}.')
    if any(a <= 1 for a in orders):
        raise ValueError('all orders must be > 1')
    if steps == 0:
        return np.zeros(len(orders))
    return np.array([_rdp_single(p, sigma, a) for a in orders]) * steps


def rdp_to_dp(
        rdp: Sequence[float],
        delta: float,
        orders: Sequence[float] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Converts an RDP curve to (epsilon, delta)-DP.

    Uses eps = rdp(a) + log1p(-1/a) - (log(delta) + log(a)) / (a - 1),
    minimized over the orders.

    Returns:
        (epsilon, best_order).
    """
    rdp = np.asarray(rdp, dtype=float)
    orders = np.asarray(orders, dtype=float)
    if rdp.size == 0 or rdp.shape != orders.shape:
        raise ValueError('rdp curve must be nonempty and aligned with orders')
    eps = rdp + np.log1p(-1 / orders) - (math.log(delta) + np.log(orders)) / (orders - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    idx = int(np.argmin(eps))
    return max(0.0, float(eps[idx])), float(orders[idx])


def dpsgd_epsilon(
        sigma: float,
        p: float,
        steps: int,
        delta: float,
        orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """Example-level epsilon of Poisson-sampled DP-SGD."""
    return rdp_to_dp(rdp_subsampled_gaussian(sigma, p, steps, orders), delta, orders)[0]


# ---------------------------------------------------------------------------
# Group privacy.


def group_lift(epsilon_ex: float, delta_ex: float, k: int) -> PrivacyBudget:
    """Lifts an example-level guarantee to k examples: (k eps, k e^{(k-1) eps} delta)."""
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}.')
    if (k - 1) * epsilon_ex > 700:
        return PrivacyBudget(k * epsilon_ex, 1.0, saturated=True)
    delta = k * math.exp((k - 1) * epsilon_ex) * delta_ex
    if delta >= 1:
        return PrivacyBudget(k * epsilon_ex, 1.0, saturated=True)
    return PrivacyBudget(k * epsilon_ex, delta)


def calibrate_sigma_dpsgd(
        budget: PrivacyBudget,
        k: int,
        p: float,
        steps: int,
        orders: Sequence[float] = DEFAULT_ORDERS,
        rtol: float = 1e-4,
) -> float:
    """Noise multiplier for DP-SGD whose k-group guarantee meets `budget`.

    The example-level target is (eps / k, delta e^{-(k-1) eps / k} / k), which
    group_lift maps back to exactly `budget`.

    Raises:
        InfeasibleCalibration: if sigma = 1e4 is not enough.
    """
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}.')
    eps_ex = budget.epsilon / k
    delta_ex = budget.delta * math.exp(-(k - 1) * budget.epsilon / k) / k

    def ok(sigma):
        return dpsgd_epsilon(sigma, p, steps, delta_ex, orders) <= eps_ex

    if not ok(_MAX_SIGMA):
        raise InfeasibleCalibration(
                f'no sigma <= {_MAX_SIGMA:g} achieves {budget} with k={k}, p={p}, steps={steps}')
    lo, hi = 1e-2, 1.0
    while ok(lo):
        lo /= 10
        if lo < 1e-6:
            return lo
    while not ok(hi):
        lo, hi = hi, min(hi * 10, _MAX_SIGMA)
    while hi / lo - 1 > rtol:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# External noise tables.


def _table_key(epsilon, delta, k, p, steps) -> tuple:
    return (float(epsilon), float(delta), int(k), float(p), int(steps))


class NoiseTable(dict):
    """Exact-match map (epsilon, delta, k, p, steps) -> sigma."""

    def lookup(self, epsilon, delta, k, p, steps) -> float | None:
        return self.get(_table_key(epsilon, delta, k, p, steps))


def load_external_noise_table(path) -> NoiseTable:
    """Reads a CSV with header `epsilon,delta,k,p,steps,sigma`."""
    table = NoiseTable()
    with open(path, newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != NOISE_TABLE_HEADER:
            raise ValueError(f'{path}: expected header {",".join(NOISE_TABLE_HEADER)}')
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(NOISE_TABLE_HEADER):
                raise ValueError(f'{path}:{lineno}: expected 6 fields, got {len(row)}')
            try:
                key = _table_key(*row[:5])
                sigma = float(row[5])
            except ValueError as e:
                raise ValueError(f'{path}:{lineno}: {e}') from None
            if not sigma > 0:
                raise ValueError(f'{path}:{lineno}: sigma must be positive')
            if key in table:
                raise ValueError(f'{path}:{lineno}: duplicate entry {key}')
            table[key] = sigma
    return table


def accountant_name(table_hit: bool, kind: str) -> str:
    """Identifier recorded next to every calibrated sigma."""
    if kind not in ('dpsgd_poisson', 'dpmf_minsep'):
        raise ValueError(f'unknown mechanism kind {kind!r}')
    if table_hit:
        return 'external_table'
    return 'analytic_gaussian' if kind == 'dpmf_minsep' else 'rdp_group_lift'

