"""Deterministic numeric kernels shared by every other module.

Stable softmax / log-sum-exp, the regularized incomplete beta function,
a terminating 3F2 hypergeometric series, and a counter-based splittable
random number stream.  Everything here is pure given its inputs.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "log_sum_exp",
    "softmax",
    "softmax_rows",
    "log_softmax_rows",
    "regularized_incomplete_beta",
    "hypergeometric_3f2_terminating",
    "RngStream",
    "rng_stream",
]

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / (1 << 53)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def log_sum_exp(logits) -> float:
    """log(sum(exp(l_i))) computed with max-subtraction so huge logits do
    not overflow.  Exact for a single entry."""
    arr = np.asarray(logits, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits must be finite")
    if arr.size == 1:
        return float(arr[0])
    m = float(arr.max())
    return m + math.log(float(np.exp(arr - m).sum()))


def softmax(logits) -> np.ndarray:
    """Probability vector exp(l_i - log_sum_exp(l)); invariant under adding
    a constant to every logit."""
    arr = np.asarray(logits, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits must be finite")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax for an (n, N) logit matrix."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# regularized incomplete beta
# ---------------------------------------------------------------------------

_BETA_EPS = 1e-14
_BETA_MAX_ITER = 500


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Lentz's modified continued fraction for I_x(a, b)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ValueError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) to absolute error <= 1e-12.

    Continued-fraction evaluation; the complement identity
    I_x(a,b) = 1 - I_{1-x}(b,a) switches branches at x > a/(a+b) where the
    fraction for the direct branch converges slowly.
    """
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must be in [0, 1], got {x}")
    if a <= 0 or b <= 0:
        raise ValueError(f"a and b must be positive, got a={a}, b={b}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x <= a / (a + b):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


# ---------------------------------------------------------------------------
# terminating 3F2
# ---------------------------------------------------------------------------

def _is_integral(x: float) -> bool:
    return abs(x - round(x)) < 1e-9


def _validate_3f2(a2: float, b1: float, b2: float) -> int:
    if a2 > 0 or not _is_integral(a2):
        raise ValueError("series does not terminate")
    n_terms = int(round(-a2)) + 1
    for b in (b1, b2):
        if b <= 0 and _is_integral(b) and -round(b) < n_terms - 1:
            raise ValueError(
                "lower parameter hits a non-positive integer inside the sum")
    return n_terms


def _log_3f2_terminating(a1: float, a2: float, a3: float,
                         b1: float, b2: float) -> tuple[int, float]:
    """Signed log evaluation of 3F2(a1, a2, a3; b1, b2; 1) when a2 is a
    non-positive integer.  Returns (sign, log|value|).

    Integral parameters (the posterior's case) are summed exactly in
    rational arithmetic: the (a2)_k factor alternates sign and the series
    cancels catastrophically in floating point once |a2| is large, while
    exact summation is immune and cheap at |a2| + 1 terms.  Non-integral
    parameters fall back to per-term log-magnitude + sign accumulation,
    which avoids overflow near |a2| ~ 100 where naive products blow up.
    """
    n_terms = _validate_3f2(a2, b1, b2)

    if all(_is_integral(v) for v in (a1, a2, a3, b1, b2)):
        from fractions import Fraction
        ia = (int(round(a1)), int(round(a2)), int(round(a3)))
        ib = (int(round(b1)), int(round(b2)))
        total = Fraction(0)
        term = Fraction(1)
        for k in range(n_terms):
            if k > 0:
                num = (ia[0] + k - 1) * (ia[1] + k - 1) * (ia[2] + k - 1)
                den = (ib[0] + k - 1) * (ib[1] + k - 1) * k
                if num == 0:
                    break
                term *= Fraction(num, den)
            total += term
        if total == 0:
            return 0, -math.inf
        sign = 1 if total > 0 else -1
        num, den = abs(total.numerator), total.denominator
        # log of a big rational without overflowing float conversion
        log_abs = (math.log2(num) - math.log2(den)) * math.log(2.0)
        return sign, log_abs

    log_terms = [0.0]
    signs = [1]
    log_t, sign = 0.0, 1
    for k in range(1, n_terms):
        num_factors = (a1 + k - 1, a2 + k - 1, a3 + k - 1)
        den_factors = (b1 + k - 1, b2 + k - 1, float(k))
        if any(f == 0.0 for f in num_factors):
            break  # a numerator pochhammer hit zero: series ends early
        for f in num_factors:
            log_t += math.log(abs(f))
            sign *= 1 if f > 0 else -1
        for f in den_factors:
            log_t -= math.log(abs(f))
            sign *= 1 if f > 0 else -1
        log_terms.append(log_t)
        signs.append(sign)

    log_terms_arr = np.array(log_terms)
    signs_arr = np.array(signs, dtype=np.float64)
    m = float(log_terms_arr.max())
    total = float((signs_arr * np.exp(log_terms_arr - m)).sum())
    if total == 0.0:
        return 0, -math.inf
    return (1 if total > 0 else -1), m + math.log(abs(total))


def hypergeometric_3f2_terminating(a1: float, a2: float, a3: float,
                                   b1: float, b2: float) -> float:
    """3F2(a1, a2, a3; b1, b2; 1) for non-positive integer a2.

    The series has exactly |a2| + 1 terms; terms are accumulated in
    log-magnitude with explicit sign tracking.
    """
    sign, log_abs = _log_3f2_terminating(a1, a2, a3, b1, b2)
    if sign == 0:
        return 0.0
    return sign * math.exp(log_abs)


# ---------------------------------------------------------------------------
# counter-based splittable RNG
# ---------------------------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """Counter-based random stream keyed by (base_seed, stream_id).

    The i-th raw draw is ``mix64(key + i * golden)`` where ``key`` is a
    64-bit hash of the seed pair and ``mix64`` is the SplitMix64 finalizer.
    Identical (base_seed, stream_id) pairs therefore reproduce identical
    sequences byte-for-byte across processes and platforms, and draws
    vectorize over counter ranges.  Instances are not safe to share across
    concurrent tasks; derive one stream per task via :meth:`split`.
    """

    def __init__(self, base_seed: int, stream_id: int = 0):
        self.base_seed = int(base_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = _mix64_int(self.base_seed + 0x632BE59BD9B4E019)
        key ^= _mix64_int((self.stream_id + 1) * _GOLDEN)
        self._key = _mix64_int(key)
        self._counter = 0

    def __repr__(self):
        return (f"RngStream(base_seed={self.base_seed}, "
                f"stream_id={self.stream_id}, counter={self._counter})")

    def split(self, k: int) -> "RngStream":
        """Derive an independent child stream; does not consume draws."""
        child_id = _mix64_int(self.stream_id * _GOLDEN + 2 * int(k) + 1)
        return RngStream(self.base_seed, child_id)

    def _raw(self, n: int) -> np.ndarray:
        counters = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        state = np.uint64(self._key) + counters * np.uint64(_GOLDEN)
        return _mix64(state)

    def uniform(self, size: int | tuple | None = None):
        """Uniform float64 in [0, 1) with 53-bit resolution."""
        if size is None:
            return float(self._raw(1)[0] >> np.uint64(11)) * _INV_2_53
        n = int(np.prod(size))
        out = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return out.reshape(size)

    def normal(self, size: int | tuple | None = None):
        """Standard normals via Box-Muller (no rejection, so the draw count
        is a deterministic function of ``size``)."""
        scalar = size is None
        n = 1 if scalar else int(np.prod(size))
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if scalar:
            return float(z[0])
        return z.reshape(size)

    def integers(self, bound: int, size: int | tuple | None = None):
        """Integers in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        u = self.uniform(size if size is not None else 1)
        vals = np.minimum((np.asarray(u) * bound).astype(np.int64), bound - 1)
        if size is None:
            return int(vals[0])
        return vals

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of 0..n-1 (argsort of raw draws)."""
        if n < 0:
            raise ValueError("n must be non-negative")
        return np.argsort(self._raw(n), kind="stable")

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from 0..n-1; k = n yields a full permutation."""
        if not 0 <= k <= n:
            raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
        return self.permutation(n)[:k]

    def shuffled(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr)[self.permutation(len(arr))]


def rng_stream(base_seed: int, stream_id: int = 0) -> RngStream:
    """Construct an RngStream (functional alias for the constructor)."""
    return RngStream(base_seed, stream_id)
