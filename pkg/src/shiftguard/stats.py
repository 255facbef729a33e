"""Exact and asymptotic statistics behind the shift tests.

Two-sample Kolmogorov-Smirnov with exact small-sample p-values, binomial
tail tests in closed form, the empirical-quantile convention used for
permutation calibration, the p*(n) disagreement bound, and the Bayesian
posterior P[q > p] for two observed disagreement counts.  Each closed form
is paired in the test suite with an enumeration or Monte-Carlo oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    RngStream,
    _log_3f2_terminating,
    regularized_incomplete_beta,
)

__all__ = [
    "KsResult",
    "PosteriorInputs",
    "ks_two_sample",
    "binomial_pvalue",
    "empirical_quantile",
    "disagreement_bound_pstar",
    "posterior_prob_shift",
    "mc_disagreement_oracle",
    "binomial_draws",
]

EXACT_KS_MAX_NM = 10_000  # lattice DP stays sub-millisecond below this


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    method: str  # "exact" | "asymptotic"


@dataclass(frozen=True)
class PosteriorInputs:
    """Disagreement counts: n of N on the reference sample, m of M on the
    candidate sample."""
    n: int
    N: int
    m: int
    M: int

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError("sample sizes must be >= 1")
        if not 0 <= self.n <= self.N:
            raise ValueError(f"need 0 <= n <= N, got n={self.n}, N={self.N}")
        if not 0 <= self.m <= self.M:
            raise ValueError(f"need 0 <= m <= M, got m={self.m}, M={self.M}")


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov
# ---------------------------------------------------------------------------

def _ks_statistic(xs: np.ndarray, ys: np.ndarray) -> float:
    """sup |F_x - F_y| over the pooled sample points (<= convention, so
    ties are handled by comparing CDFs at each distinct pooled value)."""
    pooled = np.concatenate([xs, ys])
    pooled.sort(kind="stable")
    xs_sorted = np.sort(xs)
    ys_sorted = np.sort(ys)
    fx = np.searchsorted(xs_sorted, pooled, side="right") / xs.size
    fy = np.searchsorted(ys_sorted, pooled, side="right") / ys.size
    return float(np.abs(fx - fy).max())


def _ks_exact_pvalue(xs: np.ndarray, ys: np.ndarray, d: float) -> float:
    """P(D >= d) under the permutation null by lattice-path counting.

    Walk the pooled sorted values in tie groups; a state is the number of
    x's consumed so far.  Assignments whose running CDF gap stays strictly
    below d at every group boundary are the survivors; everything else
    attains D >= d.  Counts are binomially weighted within tie groups so
    tied pooled values are handled exactly.
    """
    n, m = xs.size, ys.size
    pooled = np.concatenate([xs, ys])
    values, counts = np.unique(pooled, return_counts=True)

    # log-binomial table for group weighting
    log_fact = np.concatenate(([0.0], np.cumsum(np.log(np.arange(1, n + m + 1)))))

    def log_comb(a: int, b: int) -> float:
        if b < 0 or b > a:
            return -math.inf
        return log_fact[a] - log_fact[b] - log_fact[a - b]

    # ways[i] ~ (log-scaled) number of assignments with i x's consumed that
    # have stayed strictly below d so far
    ways = np.full(n + 1, -math.inf)
    ways[0] = 0.0
    consumed = 0
    tol = 1e-12
    for size in counts:
        size = int(size)
        consumed += size
        new_ways = np.full(n + 1, -math.inf)
        lo = max(0, consumed - m)
        hi = min(n, consumed)
        for i in range(lo, hi + 1):
            gap = abs(i / n - (consumed - i) / m)
            if gap >= d - tol:
                continue  # this boundary already attains D >= d
            # i x's consumed now; previous state j contributed C(size, i-j)
            j_lo = max(0, i - size)
            terms = []
            for j in range(j_lo, i + 1):
                if ways[j] == -math.inf:
                    continue
                terms.append(ways[j] + log_comb(size, i - j))
            if terms:
                mx = max(terms)
                new_ways[i] = mx + math.log(
                    sum(math.exp(t - mx) for t in terms))
        ways = new_ways
    if ways[n] == -math.inf:
        surviving = 0.0
    else:
        surviving = math.exp(ways[n] - log_comb(n + m, n))
    return min(1.0, max(0.0, 1.0 - surviving))


def _ks_asymptotic_pvalue(d: float, n: int, m: int) -> float:
    lam = d * math.sqrt(n * m / (n + m))
    if lam < 1e-9:
        return 1.0
    total = 0.0
    for j in range(1, 100_001):
        term = 2.0 * (-1.0) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < 1e-14:
            break
    return min(1.0, max(0.0, total))


def ks_two_sample(xs, ys) -> KsResult:
    """Two-sample KS test.

    Exact p-value (lattice-path counting over the permutation null) when
    n*m <= 10_000, otherwise the asymptotic series
    2 * sum_j (-1)^(j-1) exp(-2 j^2 lambda^2), lambda = D sqrt(nm/(n+m)).
    """
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.size == 0 or ys.size == 0:
        raise ValueError("both samples must be nonempty")
    d = _ks_statistic(xs, ys)
    if d == 0.0:
        method = "exact" if xs.size * ys.size <= EXACT_KS_MAX_NM else "asymptotic"
        return KsResult(statistic=0.0, p_value=1.0, method=method)
    if xs.size * ys.size <= EXACT_KS_MAX_NM:
        return KsResult(statistic=d,
                        p_value=_ks_exact_pvalue(xs, ys, d),
                        method="exact")
    return KsResult(statistic=d,
                    p_value=_ks_asymptotic_pvalue(d, xs.size, ys.size),
                    method="asymptotic")


# ---------------------------------------------------------------------------
# binomial test
# ---------------------------------------------------------------------------

def _binom_sf(x: int, n: int, p0: float) -> float:
    """P(X >= x) for X ~ Bin(n, p0), via the incomplete beta identity."""
    if x <= 0:
        return 1.0
    if x > n:
        return 0.0
    return regularized_incomplete_beta(p0, x, n - x + 1)


def binomial_pvalue(x: int, n: int, p0: float,
                    sided: str = "greater") -> float:
    """Closed-form binomial test p-value.

    "greater": P(X >= x).  "two_sided": doubled smaller tail, clamped at 1
    (the raw doubled expression exceeds 1 near the mode).
    """
    if not 0 <= x <= n:
        raise ValueError(f"need 0 <= x <= n, got x={x}, n={n}")
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"p0 must be in (0, 1), got {p0}")
    upper = _binom_sf(x, n, p0)
    if sided == "greater":
        return upper
    if sided == "two_sided":
        lower = 1.0 - _binom_sf(x + 1, n, p0)
        return min(1.0, 2.0 * min(upper, lower))
    raise ValueError(f"unknown sided {sided!r}")


# ---------------------------------------------------------------------------
# empirical quantile (permutation-calibration convention)
# ---------------------------------------------------------------------------

def empirical_quantile(values, q: float) -> float:
    """Lower empirical quantile: the smallest element v such that at least
    ceil(q * K) of the K values are <= v.

    The convention is pinned because verdicts flip on it at small K; a
    tiny epsilon guards ceil against float fuzz in q * K.
    """
    arr = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if arr.size == 0:
        raise ValueError("empty input")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    k = max(1, math.ceil(q * arr.size - 1e-9))
    return float(arr[k - 1])


# ---------------------------------------------------------------------------
# disagreement bound p*(n)
# ---------------------------------------------------------------------------

def disagreement_bound_pstar(n: int) -> float:
    """p*(n) = (1 - 4^-n C(2n, n)) / 2: the tightest p-free upper bound on
    P(X > Y) for X, Y iid Bin(n, p).  Strictly below 1/2, increasing in n,
    approaching 1/2 like O(1/sqrt(n))."""
    if n <= 0:
        raise ValueError("n must be positive")
    log_central = (math.lgamma(2 * n + 1) - 2 * math.lgamma(n + 1)
                   - n * math.log(4.0))
    return 0.5 * (1.0 - math.exp(log_central))


# ---------------------------------------------------------------------------
# Bayesian posterior P[q > p]
# ---------------------------------------------------------------------------

def posterior_prob_shift(inputs: PosteriorInputs) -> float:
    """Posterior probability that the true disagreement rate on the
    candidate sample exceeds that on the reference sample, under uniform
    priors on both rates.

    1 - [(M+1)!(N+1)!(m+n+1)!] / [(m+1)! n! (M-m)! (m+N+2)!]
        * 3F2(m+1, m-M, m+n+2; m+2, m+N+3; 1)

    The factorial prefactor is assembled in log space and combined with
    the signed-log 3F2 so no intermediate product can overflow.
    """
    n, N, m, M = inputs.n, inputs.N, inputs.m, inputs.M
    log_pref = (
        math.lgamma(M + 2) + math.lgamma(N + 2) + math.lgamma(m + n + 2)
        - math.lgamma(m + 2) - math.lgamma(n + 1)
        - math.lgamma(M - m + 1) - math.lgamma(m + N + 3)
    )
    sign, log_f = _log_3f2_terminating(
        m + 1.0, float(m - M), m + n + 2.0, m + 2.0, m + N + 3.0)
    if sign == 0:
        value = 1.0
    else:
        value = 1.0 - sign * math.exp(log_pref + log_f)
    overshoot = max(0.0, value - 1.0, -value)
    if overshoot > 1e-9:
        raise ValueError(
            f"posterior evaluation left [0, 1] by {overshoot:.3e}; "
            "refusing to clamp")
    return min(1.0, max(0.0, value))


# ---------------------------------------------------------------------------
# Monte-Carlo oracles
# ---------------------------------------------------------------------------

def binomial_draws(n: int, p: float, count: int, rng: RngStream) -> np.ndarray:
    """count draws from Bin(n, p) by inverse-CDF lookup on the stream."""
    if p <= 0.0:
        return np.zeros(count, dtype=np.int64)
    if p >= 1.0:
        return np.full(count, n, dtype=np.int64)
    # pmf by the stable multiplicative recurrence
    pmf = np.empty(n + 1)
    log_p, log_q = math.log(p), math.log1p(-p)
    log_pmf0 = n * log_q
    pmf[0] = math.exp(log_pmf0)
    ratio = p / (1.0 - p)
    for k in range(1, n + 1):
        pmf[k] = pmf[k - 1] * ratio * (n - k + 1) / k
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    u = rng.uniform(count)
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def mc_disagreement_oracle(n: int, p: float, trials: int,
                           rng: RngStream) -> tuple[float, float]:
    """Simulated P(X > Y) for X, Y iid Bin(n, p).

    Returns (estimate, standard error) with std err = sqrt(v / trials)
    where v is the sample variance of the exceedance indicator.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    xs = binomial_draws(n, p, trials, rng)
    ys = binomial_draws(n, p, trials, rng)
    est = float(np.mean(xs > ys))
    std_err = math.sqrt(est * (1.0 - est) / trials)
    return est, std_err
