"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

One DP-SGD step with sampling rate ``q`` and noise multiplier ``sigma`` has
RDP ``log(A_alpha) / (alpha - 1)`` at order ``alpha``, where ``A_alpha`` is
the ``alpha``-th moment of the likelihood ratio between the subsampled
mixture and the plain Gaussian. Integer orders use the binomial expansion;
fractional orders use the exact two-sided series with erfc tails. Both run
in log space, so tiny ``sigma`` gives a huge but finite epsilon.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from dpsgd.backend import kernels

DEFAULT_ORDERS = tuple(sorted(
    set(range(2, 257))
    | {1.25, 1.5, 1.75, 2.5, 3.5, 4.5}
    | {round(1.0 + 0.1 * i, 1) for i in range(1, 100)}
))

CONVERSIONS = ("improved", "classic")


class PrivacyTargetError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


def _check_q(q):
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate q must lie in (0, 1], got {q}")


def _is_int(alpha):
    return float(alpha).is_integer()


def rdp_step(q, sigma, orders=DEFAULT_ORDERS):
    """RDP of a single subsampled-Gaussian step at each order (array)."""
    _check_q(q)
    if sigma < 0:
        raise ValueError(f"noise multiplier must be non-negative, got {sigma}")
    orders = np.asarray(orders, dtype=np.float64)
    if np.any(orders <= 1):
        raise ValueError("RDP orders must exceed 1")
    if sigma == 0:
        return np.full(orders.shape, math.inf)
    if q == 1.0:
        return orders / (2.0 * sigma * sigma)
    out = np.empty(orders.shape)
    for k, a in enumerate(orders.flat):
        if _is_int(a):
            log_a = kernels.log_a_int(q, sigma, int(a))
        else:
            log_a = kernels.log_a_frac(q, sigma, float(a))
        out.flat[k] = max(log_a, 0.0) / (a - 1.0)
    return out


def compute_rdp(q, sigma, steps, orders=DEFAULT_ORDERS):
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    if steps == 0:
        return np.zeros(len(orders))
    return rdp_step(q, sigma, orders) * steps


def _convert(orders, rdp, delta, conversion):
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if conversion == "classic":
        eps = rdp - math.log(delta) / (orders - 1.0)
    elif conversion == "improved":
        eps = rdp + np.log1p(-1.0 / orders) - (math.log(delta) + np.log(orders)) / (orders - 1.0)
    else:
        raise ValueError(f"unknown conversion {conversion!r}; choose from {CONVERSIONS}")
    return np.maximum(eps, 0.0)


def get_privacy_spent(orders, rdp, delta, conversion="improved"):
    """Best ``(epsilon, order)`` over the grid for accumulated ``rdp``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    eps = _convert(orders, rdp, delta, conversion)
    if not np.isfinite(eps).any():
        return math.inf, math.nan
    k = int(np.nanargmin(np.where(np.isfinite(eps), eps, np.inf)))
    return float(eps[k]), float(np.asarray(orders)[k])


def compute_epsilon_and_order(sigma, q, steps, delta, orders=DEFAULT_ORDERS, conversion="improved"):
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    _check_q(q)
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    if steps == 0:
        return 0.0, math.nan
    if sigma == 0:
        return math.inf, math.nan
    return get_privacy_spent(orders, compute_rdp(q, sigma, steps, orders), delta, conversion)


def compute_epsilon(sigma, q, steps, delta, orders=DEFAULT_ORDERS, conversion="improved"):
    """Epsilon after ``steps`` subsampled-Gaussian steps; 0 for no steps, inf for no noise."""
    return compute_epsilon_and_order(sigma, q, steps, delta, orders, conversion)[0]


@dataclass
class AccountantState:
    """Running RDP total for a fixed ``(q, sigma)``; compose steps as they happen."""

    q: float
    sigma: float
    orders: tuple = DEFAULT_ORDERS
    steps: int = 0
    rdp: np.ndarray = field(default=None)
    _step_rdp: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._step_rdp = rdp_step(self.q, self.sigma, self.orders)
        if self.rdp is None:
            self.rdp = np.zeros(len(self.orders))

    def compose(self, steps=1):
        if steps < 0:
            raise ValueError("cannot compose a negative number of steps")
        self.steps += steps
        # recompute from the one-step value so totals are exactly T x step
        self.rdp = self._step_rdp * self.steps if self.steps else np.zeros(len(self.orders))
        return self

    def spent(self, delta, conversion="improved"):
        if self.steps == 0:
            return 0.0, math.nan
        return get_privacy_spent(self.orders, self.rdp, delta, conversion)


def find_noise_multiplier(target_epsilon, q, steps, delta, orders=DEFAULT_ORDERS, conversion="improved",
                          rtol=1e-4, max_doublings=40, max_iter=200):
    """Smallest-noise ``sigma`` whose epsilon matches ``target_epsilon``.

    Brackets by doubling/halving from 1, then bisects on the geometric mean,
    stopping once the relative epsilon error drops below ``rtol``.
    """
    if not target_epsilon > 0:
        raise ValueError(f"target epsilon must be positive, got {target_epsilon}")
    if steps <= 0:
        raise PrivacyTargetError("with zero steps every sigma gives epsilon 0; nothing to solve")

    def eps(s):
        return compute_epsilon(s, q, steps, delta, orders, conversion)

    lo = hi = 1.0
    e_hi = eps(hi)
    n = 0
    while e_hi > target_epsilon:
        lo, hi = hi, hi * 2.0
        e_hi = eps(hi)
        n += 1
        if n > max_doublings:
            raise PrivacyTargetError(f"epsilon {target_epsilon} unreachable: sigma {hi:g} still gives {e_hi:g}")
    e_lo = eps(lo)
    n = 0
    while e_lo < target_epsilon:
        hi, e_hi = lo, e_lo
        lo = lo / 2.0
        e_lo = eps(lo)
        n += 1
        if n > max_doublings:
            raise PrivacyTargetError(f"epsilon {target_epsilon} unreachable: sigma {lo:g} already gives {e_lo:g}")
    for s, e in ((lo, e_lo), (hi, e_hi)):
        if abs(e - target_epsilon) <= rtol * target_epsilon:
            return s
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        e = eps(mid)
        if abs(e - target_epsilon) < rtol * target_epsilon:
            return mid
        if e > target_epsilon:
            lo = mid
        else:
            hi = mid
    raise PrivacyTargetError(f"bisection for epsilon {target_epsilon} did not converge (bracket {lo:g}..{hi:g})")


def epsilon_curve(sigma, q, steps, deltas, orders=DEFAULT_ORDERS, conversion="improved"):
    deltas = list(deltas)
    if any(b < a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta grid must be sorted ascending")
    rdp = compute_rdp(q, sigma, steps, orders) if steps else None
    out = []
    for d in deltas:
        if steps == 0:
            out.append((d, 0.0))
        elif sigma == 0:
            out.append((d, math.inf))
        else:
            out.append((d, get_privacy_spent(orders, rdp, d, conversion)[0]))
    return out


def batch_scaling_curve(base_sigma, base_batch, n, steps, delta, batch_grid, orders=DEFAULT_ORDERS,
                        conversion="improved"):
    """Epsilon per batch size with the noise/batch ratio and step count held fixed."""
    out = []
    for b in batch_grid:
        if not 0 < b <= n:
            raise ValueError(f"batch size {b} must lie in [1, {n}]")
        sigma = base_sigma * (b / base_batch)
        out.append((int(b), compute_epsilon(sigma, b / n, steps, delta, orders, conversion)))
    return out


def write_curve_csv(path_or_file, rows, header):
    def emit(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for a, b in rows:
            w.writerow([a if isinstance(a, (int, np.integer)) else repr(float(a)), repr(float(b))])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as f:
            emit(f)


def write_epsilon_curve(path_or_file, rows):
    write_curve_csv(path_or_file, rows, ("delta", "epsilon"))


def write_batch_curve(path_or_file, rows):
    write_curve_csv(path_or_file, rows, ("batch_size", "epsilon"))
