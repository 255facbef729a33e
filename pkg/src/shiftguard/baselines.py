"""Comparison detectors under the same permutation-calibration harness.

Deep-ensemble disagreement and entropy tests, per-dimension softmax KS
with Bonferroni combination, and the classifier two-sample test.  Every
baseline emits the same verdict type as the primary detector and gets its
significance threshold from K null draws through the identical code path
used at test time, so power numbers are comparable by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .detectron import PartitionedData, TestVerdict
from .learners import LearnerConfig, Model, fit
from .numerics import RngStream
from .stats import binomial_pvalue, empirical_quantile, ks_two_sample

__all__ = [
    "EnsembleSpec",
    "train_ensemble",
    "ensemble_disagreement_test",
    "ensemble_entropy_test",
    "bbsd_test",
    "ctst_test",
    "BaselineCalibration",
    "make_baseline_detector",
]

DEFAULT_REF_SIZE = 1000  # reference pool cap for iid-assuming baselines


@dataclass(frozen=True)
class EnsembleSpec:
    """Deep-ensemble configuration: members vary only by seed."""
    size: int = 10
    seeds: tuple = ()

    def __post_init__(self):
        seeds = self.seeds if self.seeds else tuple(range(self.size))
        object.__setattr__(self, "seeds", seeds)
        if self.size < 2:
            raise ValueError("ensemble size must be >= 2")
        if len(set(self.seeds)) != self.size:
            raise ValueError("need exactly `size` distinct seeds")


def train_ensemble(config: LearnerConfig, data: PartitionedData,
                   spec: EnsembleSpec, rng: RngStream) -> list[Model]:
    """Fit `size` models differing only in their random stream."""
    X, y = data.train_pair()
    Xv, yv = data.val_pair()
    return [fit(config, X, y, Xv, yv, rng.split(seed))
            for seed in spec.seeds]


# ---------------------------------------------------------------------------
# raw statistics (p-values); thresholds come from permutation calibration
# ---------------------------------------------------------------------------

def _ensemble_labels(models, X):
    return np.stack([m.predict_labels(X) for m in models], axis=0)


def _disagreement_mask(models, X) -> np.ndarray:
    """True where the ensemble's argmax votes are not unanimous."""
    labels = _ensemble_labels(models, X)
    return (labels != labels[0]).any(axis=0)


def ensemble_disagreement_stat(models, ref_X, Q_X) -> tuple[float, tuple]:
    """Binomial tail p-value for Q's non-unanimous count against the
    reference disagreement rate (add-one smoothed at the degenerate
    edges, flagged)."""
    ref_dis = _disagreement_mask(models, ref_X)
    p_hat = float(ref_dis.mean())
    flags = ()
    if p_hat in (0.0, 1.0):
        p_hat = (ref_dis.sum() + 1.0) / (ref_dis.size + 2.0)
        flags = ("smoothed_rate",)
    x = int(_disagreement_mask(models, Q_X).sum())
    return binomial_pvalue(x, Q_X.shape[0], p_hat, "greater"), flags


def _mean_entropy(models, X) -> np.ndarray:
    p_hat = models[0].predict_proba_matrix(X)
    for m in models[1:]:
        p_hat = p_hat + m.predict_proba_matrix(X)
    p_hat /= len(models)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_hat > 0.0, p_hat * np.log(p_hat), 0.0)
    return -terms.sum(axis=1)


def ensemble_entropy_stat(models, ref_X, Q_X) -> tuple[float, tuple]:
    """KS p-value between predictive-entropy distributions on Q and the
    reference sample."""
    return ks_two_sample(_mean_entropy(models, Q_X),
                         _mean_entropy(models, ref_X)).p_value, ()


def bbsd_stat(f: Model, ref_X, Q_X) -> tuple[float, tuple]:
    """Per-class-dimension KS on softmax outputs, Bonferroni-combined.

    Combination multiplies the minimum p-value by the number of
    dimensions (clamped at 1); permutation calibration makes the verdict
    invariant to the monotone choice of combination direction.
    """
    probs_ref = f.predict_proba_matrix(ref_X)
    probs_q = f.predict_proba_matrix(Q_X)
    p_min = min(
        ks_two_sample(probs_q[:, c], probs_ref[:, c]).p_value
        for c in range(f.num_classes))
    return min(1.0, f.num_classes * p_min), ()


def ctst_stat(config: LearnerConfig, source_X, Q_X,
              rng: RngStream) -> tuple[float, tuple]:
    """Domain-classifier two-sample test.

    Train on half of Q against an equal-size source draw's first half
    (labels: source 0, target 1), then test held-out domain assignment
    accuracy against coin flipping with a binomial tail.
    """
    n_q = Q_X.shape[0]
    if n_q < 4:
        raise ValueError("insufficient samples to split")
    if source_X.shape[0] < n_q:
        raise ValueError("source pool smaller than the candidate sample")
    src = source_X[rng.sample_without_replacement(source_X.shape[0], n_q)]
    q_perm = Q_X[rng.permutation(n_q)]
    half = n_q // 2
    X_train = np.vstack([src[:half], q_perm[:half]])
    y_train = np.concatenate([np.zeros(half, np.int64),
                              np.ones(half, np.int64)])
    X_test = np.vstack([src[half:], q_perm[half:]])
    y_test = np.concatenate([np.zeros(n_q - half, np.int64),
                             np.ones(n_q - half, np.int64)])
    clf = fit(config, X_train, y_train, X_train, y_train, rng.split(17))
    x = int(np.sum(clf.predict_labels(X_test) == y_test))
    return binomial_pvalue(x, y_test.size, 0.5, "greater"), ()


# ---------------------------------------------------------------------------
# permutation-calibrated harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineCalibration:
    detector_id: str
    tau: float
    alpha: float
    sample_size: int
    null_p_values: tuple


def _verdict(detector_id, p_value, calib, n, rng, flags,
             elapsed_ms) -> TestVerdict:
    return TestVerdict(
        test=detector_id,
        statistic=float(p_value),
        threshold=calib.tau,
        shift_detected=bool(p_value < calib.tau),
        sample_size=n,
        seeds={"base_seed": rng.base_seed, "stream_id": rng.stream_id},
        wall_time_ms=elapsed_ms,
        flags=tuple(flags),
    )


def make_baseline_detector(detector_id: str, config: LearnerConfig,
                           data: PartitionedData, f: Model, N: int,
                           K: int, alpha: float, rng: RngStream,
                           ensemble_spec: EnsembleSpec | None = None,
                           ref_size: int = DEFAULT_REF_SIZE):
    """Calibrate one baseline; returns verdict_fn(Q_X, rng).

    The held-out pool is split (deterministically per rng) into a
    reference sample for the statistic and a null pool from which the K
    calibration draws come, so calibration draws stay exchangeable with a
    fresh null candidate sample.
    """
    holdout_X = data.holdout.features
    n_holdout = holdout_X.shape[0]
    perm = rng.split(0).permutation(n_holdout)
    n_ref = min(ref_size, n_holdout // 2)
    ref_X = holdout_X[perm[:n_ref]]
    null_pool = holdout_X[perm[n_ref:]]
    if null_pool.shape[0] < N:
        raise ValueError(
            "insufficient held-out data to calibrate a baseline: "
            f"null pool has {null_pool.shape[0]} rows, need {N}")

    if detector_id in ("ensemble_disagreement", "ensemble_entropy"):
        spec = ensemble_spec or EnsembleSpec()
        models = train_ensemble(config, data, spec, rng.split(1))
        if detector_id == "ensemble_disagreement":
            stat_fn = lambda Q_X, r: ensemble_disagreement_stat(
                models, ref_X, Q_X)
        else:
            stat_fn = lambda Q_X, r: ensemble_entropy_stat(models, ref_X, Q_X)
    elif detector_id == "bbsd":
        stat_fn = lambda Q_X, r: bbsd_stat(f, ref_X, Q_X)
    elif detector_id == "ctst":
        stat_fn = lambda Q_X, r: ctst_stat(config, ref_X, Q_X, r)
    else:
        raise ValueError(f"unknown baseline detector {detector_id!r}")

    null_ps = []
    for i in range(K):
        run_rng = rng.split(100 + i)
        idx = run_rng.sample_without_replacement(null_pool.shape[0], N)
        null_ps.append(stat_fn(null_pool[idx], run_rng)[0])
    calib = BaselineCalibration(
        detector_id=detector_id,
        tau=empirical_quantile(null_ps, alpha),
        alpha=alpha,
        sample_size=N,
        null_p_values=tuple(null_ps),
    )

    def verdict_fn(Q_X, verdict_rng: RngStream) -> TestVerdict:
        Q_X = np.asarray(Q_X, dtype=np.float64)
        if Q_X.shape[0] != N:
            raise ValueError("sample size must match calibration")
        start = time.perf_counter()
        p_value, flags = stat_fn(Q_X, verdict_rng)
        elapsed = (time.perf_counter() - start) * 1000.0
        return _verdict(detector_id, p_value, calib, N, verdict_rng,
                        flags, elapsed)

    verdict_fn.calibration = calib
    return verdict_fn


# convenience single-shot wrappers around pre-calibrated statistics

def ensemble_disagreement_test(models, ref_X, Q_X, alpha,
                               tau: float) -> TestVerdict:
    """Verdict from a pre-computed threshold (see make_baseline_detector
    for the calibrated route)."""
    start = time.perf_counter()
    p_value, flags = ensemble_disagreement_stat(models, ref_X, Q_X)
    elapsed = (time.perf_counter() - start) * 1000.0
    calib = BaselineCalibration("ensemble_disagreement", tau, alpha,
                                Q_X.shape[0], ())
    return _verdict("ensemble_disagreement", p_value, calib,
                    Q_X.shape[0], RngStream(0, 0), flags, elapsed)


def ensemble_entropy_test(models, ref_X, Q_X, alpha, tau) -> TestVerdict:
    start = time.perf_counter()
    p_value, flags = ensemble_entropy_stat(models, ref_X, Q_X)
    elapsed = (time.perf_counter() - start) * 1000.0
    calib = BaselineCalibration("ensemble_entropy", tau, alpha,
                                Q_X.shape[0], ())
    return _verdict("ensemble_entropy", p_value, calib, Q_X.shape[0],
                    RngStream(0, 0), flags, elapsed)


def bbsd_test(f: Model, ref_X, Q_X, alpha, tau) -> TestVerdict:
    start = time.perf_counter()
    p_value, flags = bbsd_stat(f, ref_X, Q_X)
    elapsed = (time.perf_counter() - start) * 1000.0
    calib = BaselineCalibration("bbsd", tau, alpha, Q_X.shape[0], ())
    return _verdict("bbsd", p_value, calib, Q_X.shape[0],
                    RngStream(0, 0), flags, elapsed)


def ctst_test(config: LearnerConfig, source_X, Q_X, alpha, tau,
              rng: RngStream) -> TestVerdict:
    start = time.perf_counter()
    p_value, flags = ctst_stat(config, source_X, Q_X, rng)
    elapsed = (time.perf_counter() - start) * 1000.0
    calib = BaselineCalibration("ctst", tau, alpha, Q_X.shape[0], ())
    return _verdict("ctst", p_value, calib, Q_X.shape[0], rng, flags,
                    elapsed)
