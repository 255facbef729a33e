"""Shift detection by calibrated constrained disagreement.

Calibration trains K ensembles against held-out training-distribution
samples, recording each run's disagreement rate and per-sample ensemble
entropies.  A candidate sample is then attacked with the exact same
configuration: the disagreement test flags shift when its rate exceeds
the (1 - alpha) calibration quantile, the entropy test when the KS
p-value of its entropies against pooled calibration entropies falls
below the alpha quantile of leave-one-out calibration p-values.
Calibration records persist as versioned JSON and refuse to pair with a
mismatched configuration.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .cdc import CdcTrainSpec, build_ensemble, cdc_entropy
from .data import Dataset, ShiftTaskSpec, partition, synth_generate
from .learners import (
    LearnerConfig,
    Model,
    config_to_dict,
    fit,
    model_fingerprint,
)
from .numerics import RngStream
from .stats import empirical_quantile, ks_two_sample

__all__ = [
    "CALIBRATION_FORMAT_VERSION",
    "PartitionedData",
    "CalibrationRecord",
    "TestVerdict",
    "BenchmarkTask",
    "DatasetTask",
    "config_hash",
    "calibrate",
    "test_disagreement",
    "test_entropy",
    "test_both",
    "evaluate_power",
    "disagreement_curve",
    "disagreement_statistic_psi",
    "save_calibration",
    "load_calibration",
    "DETECTOR_IDS",
]

CALIBRATION_FORMAT_VERSION = 1

DETECTOR_IDS = (
    "detectron_disagreement",
    "detectron_entropy",
    "ensemble_disagreement",
    "ensemble_entropy",
    "bbsd",
    "ctst",
    "always_reject",
    "never_reject",
)


@dataclass(frozen=True)
class PartitionedData:
    """The three source splits: CDC training set, validation set, and the
    held-out pool calibration samples are drawn from."""
    train: Dataset
    val: Dataset
    holdout: Dataset

    def train_pair(self):
        return self.train.features, self.train.labels

    def val_pair(self):
        return self.val.features, self.val.labels


@dataclass(frozen=True)
class TestVerdict:
    test: str
    statistic: float
    threshold: float
    shift_detected: bool
    sample_size: int
    seeds: dict
    wall_time_ms: float
    config_hash: str = ""
    flags: tuple = ()

    def to_json_dict(self) -> dict:
        return {
            "test": self.test,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "shift_detected": self.shift_detected,
            "sample_size": self.sample_size,
            "seeds": dict(self.seeds),
            "wall_time_ms": self.wall_time_ms,
            "config_hash": self.config_hash,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class CalibrationRecord:
    config_hash: str
    sample_size: int
    K: int
    alpha: float
    phi_p: tuple
    entropy_runs: tuple       # K tuples of sample_size entropies
    calib_p_values: tuple
    tau_disagreement: float
    tau_entropy: float
    config_snapshot: dict
    base_seed: int
    stream_id: int = 0
    version: int = CALIBRATION_FORMAT_VERSION

    def __post_init__(self):
        if len(self.phi_p) != self.K or len(self.entropy_runs) != self.K:
            raise ValueError("calibration arrays must have K entries")
        if any(len(e) != self.sample_size for e in self.entropy_runs):
            raise ValueError(
                "each entropy run must have sample_size entries")
        if not np.isclose(self.tau_disagreement,
                          empirical_quantile(self.phi_p, 1.0 - self.alpha)):
            raise ValueError("tau_disagreement does not match its quantile")
        if not np.isclose(self.tau_entropy,
                          empirical_quantile(self.calib_p_values, self.alpha)):
            raise ValueError("tau_entropy does not match its quantile")

    def pooled_entropies(self, drop_index: int) -> np.ndarray:
        runs = [np.asarray(run) for i, run in enumerate(self.entropy_runs)
                if i != drop_index]
        return np.concatenate(runs)


def config_hash(data: PartitionedData, config: LearnerConfig, f: Model,
                spec: CdcTrainSpec, N: int, K: int, alpha: float) -> str:
    snapshot = _config_snapshot(data, config, f, spec, N, K, alpha)
    return _hash_snapshot(snapshot)


def _config_snapshot(data, config, f, spec, N, K, alpha) -> dict:
    return {
        "learner": config_to_dict(config),
        "cdc": spec.to_dict(),
        "N": N,
        "K": K,
        "alpha": alpha,
        "train_fingerprint": data.train.fingerprint,
        "val_fingerprint": data.val.fingerprint,
        "holdout_fingerprint": data.holdout.fingerprint,
        "model_fingerprint": model_fingerprint(f),
    }


def _hash_snapshot(snapshot: dict) -> str:
    payload = json.dumps(snapshot, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _calibration_run(args):
    (config, train_pair, val_pair, holdout_X, f, spec, base_seed,
     stream_id, run_index, N) = args
    run_rng = RngStream(base_seed, stream_id).split(run_index)
    idx = run_rng.sample_without_replacement(holdout_X.shape[0], N)
    p_star = holdout_X[idx]
    ens = build_ensemble(config, train_pair, val_pair, p_star, f, spec,
                         run_rng)
    return ens.phi_final, tuple(float(v) for v in cdc_entropy(ens, p_star))


def calibrate(data: PartitionedData, config: LearnerConfig, f: Model,
              N: int, K: int, spec: CdcTrainSpec, alpha: float,
              rng: RngStream, jobs: int = 1) -> CalibrationRecord:
    """Estimate the null distributions of both test statistics.

    Each of the K runs draws N held-out samples without replacement from
    its own derived stream, builds a CDC ensemble against them, and
    records the final disagreement rate and the per-sample ensemble
    entropies.  Entropy calibration p-values come from a KS test of each
    run against the pooled entropies of the other K - 1 runs.
    """
    if len(data.holdout) < N:
        raise ValueError(
            f"insufficient held-out data: need {N}, have {len(data.holdout)}")
    if K < 20:
        raise ValueError("K must be >= 20 for a usable null estimate")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")

    run_args = [
        (config, data.train_pair(), data.val_pair(), data.holdout.features,
         f, spec, rng.base_seed, rng.stream_id, i, N)
        for i in range(K)
    ]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_calibration_run, run_args))
    else:
        results = [_calibration_run(a) for a in run_args]

    phi_p = tuple(r[0] for r in results)
    entropy_runs = tuple(r[1] for r in results)
    calib_p_values = tuple(
        ks_two_sample(
            entropy_runs[i],
            np.concatenate([entropy_runs[j] for j in range(K) if j != i]),
        ).p_value
        for i in range(K)
    )
    snapshot = _config_snapshot(data, config, f, spec, N, K, alpha)
    return CalibrationRecord(
        config_hash=_hash_snapshot(snapshot),
        sample_size=N,
        K=K,
        alpha=alpha,
        phi_p=phi_p,
        entropy_runs=entropy_runs,
        calib_p_values=calib_p_values,
        tau_disagreement=empirical_quantile(phi_p, 1.0 - alpha),
        tau_entropy=empirical_quantile(calib_p_values, alpha),
        config_snapshot=snapshot,
        base_seed=rng.base_seed,
        stream_id=rng.stream_id,
    )


# ---------------------------------------------------------------------------
# test-time verdicts
# ---------------------------------------------------------------------------

def _check_test_inputs(Q_X, calib, data, config, f, spec):
    Q_X = np.asarray(Q_X, dtype=np.float64)
    if Q_X.shape[0] != calib.sample_size:
        raise ValueError("sample size must match calibration: "
                         f"got {Q_X.shape[0]}, calibrated {calib.sample_size}")
    live_hash = config_hash(data, config, f, spec, calib.sample_size,
                            calib.K, calib.alpha)
    if live_hash != calib.config_hash:
        raise ValueError(
            "calibration/config mismatch: refusing to test with a "
            "configuration different from the calibrated one")
    return Q_X


def _build_q_ensemble(Q_X, data, config, f, spec, rng):
    return build_ensemble(config, data.train_pair(), data.val_pair(),
                          Q_X, f, spec, rng)


def _disagreement_verdict(phi_q, calib, rng, elapsed_ms) -> TestVerdict:
    return TestVerdict(
        test="detectron_disagreement",
        statistic=float(phi_q),
        threshold=calib.tau_disagreement,
        shift_detected=bool(phi_q > calib.tau_disagreement),
        sample_size=calib.sample_size,
        seeds={"base_seed": rng.base_seed, "stream_id": rng.stream_id},
        wall_time_ms=elapsed_ms,
        config_hash=calib.config_hash,
    )


def _entropy_verdict(q_entropies, calib, rng, elapsed_ms) -> TestVerdict:
    drop = rng.integers(calib.K)
    pooled = calib.pooled_entropies(drop)
    p_value = ks_two_sample(q_entropies, pooled).p_value
    return TestVerdict(
        test="detectron_entropy",
        statistic=float(p_value),
        threshold=calib.tau_entropy,
        shift_detected=bool(p_value < calib.tau_entropy),
        sample_size=calib.sample_size,
        seeds={"base_seed": rng.base_seed, "stream_id": rng.stream_id,
               "dropped_run": int(drop)},
        wall_time_ms=elapsed_ms,
        config_hash=calib.config_hash,
    )


def test_disagreement(Q_X, calib: CalibrationRecord, data: PartitionedData,
                      config: LearnerConfig, f: Model, spec: CdcTrainSpec,
                      rng: RngStream) -> TestVerdict:
    """Disagreement test: shift iff phi_Q exceeds the calibrated
    (1 - alpha) quantile of the null rates."""
    Q_X = _check_test_inputs(Q_X, calib, data, config, f, spec)
    start = time.perf_counter()
    ens = _build_q_ensemble(Q_X, data, config, f, spec, rng)
    elapsed = (time.perf_counter() - start) * 1000.0
    return _disagreement_verdict(ens.phi_final, calib, rng, elapsed)


def test_entropy(Q_X, calib: CalibrationRecord, data: PartitionedData,
                 config: LearnerConfig, f: Model, spec: CdcTrainSpec,
                 rng: RngStream) -> TestVerdict:
    """Entropy test: shift iff the KS p-value of Q's ensemble entropies
    against pooled calibration entropies (one run dropped at random)
    falls below the calibrated alpha quantile."""
    Q_X = _check_test_inputs(Q_X, calib, data, config, f, spec)
    start = time.perf_counter()
    ens = _build_q_ensemble(Q_X, data, config, f, spec, rng)
    q_entropies = cdc_entropy(ens, Q_X)
    elapsed = (time.perf_counter() - start) * 1000.0
    return _entropy_verdict(q_entropies, calib, rng, elapsed)


def test_both(Q_X, calib: CalibrationRecord, data: PartitionedData,
              config: LearnerConfig, f: Model, spec: CdcTrainSpec,
              rng: RngStream) -> tuple[TestVerdict, TestVerdict]:
    """Both verdicts from one ensemble build.

    Each verdict is marginally identical to its dedicated operation; the
    two simply share the trained ensemble (and therefore randomness).
    """
    Q_X = _check_test_inputs(Q_X, calib, data, config, f, spec)
    start = time.perf_counter()
    ens = _build_q_ensemble(Q_X, data, config, f, spec, rng)
    q_entropies = cdc_entropy(ens, Q_X)
    elapsed = (time.perf_counter() - start) * 1000.0
    return (_disagreement_verdict(ens.phi_final, calib, rng, elapsed),
            _entropy_verdict(q_entropies, calib, rng, elapsed))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def calibration_to_doc(calib: CalibrationRecord) -> dict:
    return {
        "format_version": calib.version,
        "config_hash": calib.config_hash,
        "sample_size": calib.sample_size,
        "K": calib.K,
        "alpha": calib.alpha,
        "phi_p": list(calib.phi_p),
        "entropy_runs": [list(r) for r in calib.entropy_runs],
        "calib_p_values": list(calib.calib_p_values),
        "tau_disagreement": calib.tau_disagreement,
        "tau_entropy": calib.tau_entropy,
        "config_snapshot": calib.config_snapshot,
        "base_seed": calib.base_seed,
        "stream_id": calib.stream_id,
    }


def calibration_from_doc(doc: dict) -> CalibrationRecord:
    if doc.get("format_version") != CALIBRATION_FORMAT_VERSION:
        raise ValueError(
            f"unsupported calibration format {doc.get('format_version')}")
    return CalibrationRecord(
        config_hash=doc["config_hash"],
        sample_size=doc["sample_size"],
        K=doc["K"],
        alpha=doc["alpha"],
        phi_p=tuple(doc["phi_p"]),
        entropy_runs=tuple(tuple(r) for r in doc["entropy_runs"]),
        calib_p_values=tuple(doc["calib_p_values"]),
        tau_disagreement=doc["tau_disagreement"],
        tau_entropy=doc["tau_entropy"],
        config_snapshot=doc["config_snapshot"],
        base_seed=doc["base_seed"],
        stream_id=doc["stream_id"],
    )


def save_calibration(calib: CalibrationRecord, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(calibration_to_doc(calib), fh, sort_keys=True)


def load_calibration(path) -> CalibrationRecord:
    with open(path, encoding="utf-8") as fh:
        return calibration_from_doc(json.load(fh))


# ---------------------------------------------------------------------------
# power evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetTask:
    """Benchmark source backed by concrete datasets (e.g. the tabular
    heart-disease pair) instead of a synthetic generator."""
    source: Dataset
    target: Dataset


@dataclass(frozen=True)
class BenchmarkTask:
    """Everything needed to score detectors on one synthetic/tabular task."""
    data_spec: ShiftTaskSpec | DatasetTask
    learner: LearnerConfig
    cdc: CdcTrainSpec = field(default_factory=CdcTrainSpec)
    K: int = 100
    fractions: tuple = (0.7, 0.1, 0.2)


def prepare_task(task: BenchmarkTask, rng: RngStream):
    """Materialize (partitioned data, target features, base model)."""
    if isinstance(task.data_spec, DatasetTask):
        source, target = task.data_spec.source, task.data_spec.target
    else:
        source, target, _ = synth_generate(task.data_spec)
    train, val, holdout = partition(source, task.fractions, rng.split(1))
    data = PartitionedData(train, val, holdout)
    f = fit(task.learner, train.features, train.labels,
            val.features, val.labels, rng.split(2))
    return data, target.features, f


def evaluate_power(task: BenchmarkTask, detector_id: str, N: int,
                   trials: int, alpha: float, rng: RngStream,
                   jobs: int = 1) -> tuple[float, float]:
    """TPR at the calibrated significance level over repeated Q draws.

    Draws `trials` independent size-N samples from the task's shifted
    target source, runs the detector on each, and reports the detection
    fraction with its binomial standard error.
    """
    if trials < 30:
        raise ValueError("trials must be >= 30 for a meaningful rate")
    if detector_id not in DETECTOR_IDS:
        raise ValueError(f"unknown detector id {detector_id!r}")

    if detector_id == "always_reject":
        return 1.0, 0.0
    if detector_id == "never_reject":
        return 0.0, 0.0

    data, target_X, f = prepare_task(task, rng.split(0))
    verdict_fn = make_detector(task, detector_id, data, f, N, alpha,
                               rng.split(3), jobs=jobs)
    hits = 0
    for t in range(trials):
        trial_rng = rng.split(1000 + t)
        idx = trial_rng.sample_without_replacement(target_X.shape[0], N)
        verdict = verdict_fn(target_X[idx], trial_rng)
        hits += bool(verdict.shift_detected)
    tpr = hits / trials
    return tpr, float(np.sqrt(tpr * (1.0 - tpr) / trials))


def make_detector(task: BenchmarkTask, detector_id: str,
                  data: PartitionedData, f: Model, N: int, alpha: float,
                  rng: RngStream, jobs: int = 1):
    """Calibrate a detector once; returns verdict_fn(Q_X, rng)."""
    if detector_id in ("detectron_disagreement", "detectron_entropy"):
        calib = calibrate(data, task.learner, f, N, task.K, task.cdc,
                          alpha, rng, jobs=jobs)
        if detector_id == "detectron_disagreement":
            return lambda Q_X, r: test_disagreement(
                Q_X, calib, data, task.learner, f, task.cdc, r)
        return lambda Q_X, r: test_entropy(
            Q_X, calib, data, task.learner, f, task.cdc, r)
    from . import baselines
    return baselines.make_baseline_detector(
        detector_id, task.learner, data, f, N, task.K, alpha, rng)


# ---------------------------------------------------------------------------
# runtime diagnostics (disagreement statistic psi)
# ---------------------------------------------------------------------------

def disagreement_curve(config: LearnerConfig, data: PartitionedData,
                       target_X, f: Model, budget_steps: int,
                       rng: RngStream) -> np.ndarray:
    """Cumulative disagreement rate after each optimization step.

    One model warm-starts from the base and takes a single optimization
    step (batch or boosting round) per budget tick against the samples it
    still agrees on; disagreed samples are removed and counted.  The
    curve is padded with its final value once everything is disagreed on.
    """
    from .cdc import pseudo_label
    from .learners import fit_disagreeing
    from .losses import lambda_weight

    target_X = np.asarray(target_X, dtype=np.float64)
    n_q = target_X.shape[0]
    if n_q == 0 or budget_steps < 1:
        raise ValueError("need a nonempty target and positive budget")
    pseudo = pseudo_label(f, target_X)
    lam = lambda_weight(n_q, 1)
    surviving = np.arange(n_q)
    g = f
    curve = np.empty(budget_steps)
    for t in range(budget_steps):
        if surviving.size > 0:
            g = fit_disagreeing(
                config, g, data.train_pair(), data.val_pair(),
                (target_X[surviving], pseudo[surviving]), lam, rng,
                epochs=1, max_steps=1)
            preds = g.predict_labels(target_X[surviving])
            surviving = surviving[preds == pseudo[surviving]]
        curve[t] = 1.0 - surviving.size / n_q
    return curve


def disagreement_statistic_psi(runs_q, runs_p) -> tuple[np.ndarray, np.ndarray]:
    """Mean paired difference of disagreement trajectories per budget step.

    runs_q and runs_p are (runs, steps) arrays from paired executions;
    returns (psi, standard error) per step.
    """
    runs_q = np.asarray(runs_q, dtype=np.float64)
    runs_p = np.asarray(runs_p, dtype=np.float64)
    if runs_q.shape != runs_p.shape or runs_q.ndim != 2:
        raise ValueError("paired runs must share budgets "
                         f"(got {runs_q.shape} vs {runs_p.shape})")
    diff = runs_q - runs_p
    psi = diff.mean(axis=0)
    if diff.shape[0] > 1:
        se = diff.std(axis=0, ddof=1) / np.sqrt(diff.shape[0])
    else:
        se = np.zeros_like(psi)
    return psi, se
