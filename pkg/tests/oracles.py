"""Independent oracles used to freeze expected values in the tests.

Everything here deliberately avoids the library's own code paths:
enumeration uses exact integer combinatorics, ECDFs are brute-force mean
comparisons, and Monte Carlo goes through order statistics rather than
any closed form under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from shiftguard.numerics import RngStream


def brute_ks_statistic(xs, ys) -> float:
    """sup |F_x(v) - F_y(v)| over pooled values, ECDFs by brute counting."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    best = 0.0
    for v in np.concatenate([xs, ys]):
        fx = float(np.mean(xs <= v))
        fy = float(np.mean(ys <= v))
        best = max(best, abs(fx - fy))
    return best


def enumerate_ks_pvalue(xs, ys) -> float:
    """P(D >= observed D) over all C(n+m, n) label assignments of the
    pooled sample."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n, m = xs.size, ys.size
    pooled = np.concatenate([xs, ys])
    d_obs = brute_ks_statistic(xs, ys)
    total = 0
    attained = 0
    for x_idx in itertools.combinations(range(n + m), n):
        mask = np.zeros(n + m, dtype=bool)
        mask[list(x_idx)] = True
        d = brute_ks_statistic(pooled[mask], pooled[~mask])
        total += 1
        if d >= d_obs - 1e-12:
            attained += 1
    return attained / total


def enumerate_binom_sf(x: int, n: int, p: float) -> float:
    """P(X >= x) by exact-summation of C(n,k) p^k (1-p)^(n-k)."""
    return float(sum(
        math.comb(n, k) * (p ** k) * ((1.0 - p) ** (n - k))
        for k in range(x, n + 1)))


def enumerate_binom_two_sided(x: int, n: int, p: float) -> float:
    upper = enumerate_binom_sf(x, n, p)
    lower = 1.0 - enumerate_binom_sf(x + 1, n, p)
    return min(1.0, 2.0 * min(upper, lower))


def beta_mc_prob_q_gt_p(n: int, N: int, m: int, M: int, pairs: int,
                        rng: RngStream, chunk: int = 200_000) -> float:
    """Monte-Carlo P(q > p) with p ~ Beta(n+1, N-n+1), q ~ Beta(m+1, M-m+1).

    Beta draws come from order statistics of uniforms: the (k+1)-th
    smallest of (S+1) uniforms is Beta(k+1, S-k+1).
    """
    hits = 0
    done = 0
    while done < pairs:
        c = min(chunk, pairs - done)
        up = np.sort(rng.uniform((c, N + 1)), axis=1)
        uq = np.sort(rng.uniform((c, M + 1)), axis=1)
        p_draws = up[:, n]
        q_draws = uq[:, m]
        hits += int(np.sum(q_draws > p_draws))
        done += c
    return hits / pairs


def central_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar fn at x by central finite differences."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g
