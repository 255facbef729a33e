"""Constrained disagreement training and ensemble construction.

A constrained disagreement classifier (CDC) starts from a base model and
is pushed to disagree with it on a target set while a validation
constraint pins its in-distribution behavior: training aborts the moment
the validation metric drops more than a tolerance below the base model's
recorded score, and the last constraint-satisfying snapshot wins.  An
ensemble trains members sequentially, each one attacking only the target
samples every earlier member still agrees on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .learners import (
    LearnerConfig,
    Model,
    batches_per_epoch,
    doc_to_model,
    evaluate_metric,
    fit_disagreeing,
    model_to_doc,
)
from .losses import lambda_weight
from .numerics import RngStream

__all__ = [
    "CdcTrainSpec",
    "CdcEnsemble",
    "pseudo_label",
    "train_cdc",
    "build_ensemble",
    "cdc_entropy",
    "ensemble_to_doc",
    "ensemble_from_doc",
]


@dataclass(frozen=True)
class CdcTrainSpec:
    """Knobs for disagreement training.

    max_opt_steps caps total optimization steps per CDC (batches for the
    MLP, boosting rounds for trees) on top of the validation-drop guard;
    runaway budgets let disagreement saturate on in-distribution data and
    drain the test of power.
    """
    ensemble_max: int = 5
    val_tolerance: float = 0.05
    max_epochs_per_cdc: int = 10
    max_opt_steps: int | None = None

    def __post_init__(self):
        if self.ensemble_max < 1:
            raise ValueError("ensemble_max must be >= 1")
        if not 0.0 < self.val_tolerance <= 1.0:
            raise ValueError("val_tolerance must be in (0, 1]")
        if self.max_epochs_per_cdc < 1:
            raise ValueError("max_epochs_per_cdc must be >= 1")
        if self.max_opt_steps is not None and self.max_opt_steps < 1:
            raise ValueError("max_opt_steps must be >= 1 when set")

    def to_dict(self) -> dict:
        return {
            "ensemble_max": self.ensemble_max,
            "val_tolerance": self.val_tolerance,
            "max_epochs_per_cdc": self.max_epochs_per_cdc,
            "max_opt_steps": self.max_opt_steps,
        }


@dataclass
class CdcEnsemble:
    """Base model plus trained CDCs with per-round disagreement records."""
    base: Model
    members: list = field(default_factory=list)
    per_round_phi: list = field(default_factory=list)
    surviving_indices: np.ndarray = None
    target_size: int = 0

    @property
    def phi_final(self) -> float:
        if not self.per_round_phi:
            return 0.0
        return self.per_round_phi[-1]

    def phi_at(self, size: int) -> float:
        """Disagreement rate after the first ``size`` members (rates
        freeze once the surviving set empties)."""
        if size < 1:
            raise ValueError("size must be >= 1")
        if not self.per_round_phi:
            return 0.0
        return self.per_round_phi[min(size, len(self.per_round_phi)) - 1]

    def all_models(self) -> list:
        return [self.base, *self.members]


def pseudo_label(f: Model, X_q: np.ndarray) -> np.ndarray:
    """Label every target row with the base model's predicted class."""
    X_q = np.asarray(X_q, dtype=np.float64)
    if X_q.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return f.predict_labels(X_q)


def train_cdc(config: LearnerConfig, P_train, P_val, Q_pseudo, f: Model,
              spec: CdcTrainSpec, rng: RngStream) -> Model:
    """One constrained disagreement classifier.

    Trains for at most max_epochs_per_cdc epochs (rounds for trees) and
    stops the moment the validation metric falls more than val_tolerance
    below the base model's recorded score m0; the returned model is the
    last one that satisfied the constraint (the base model trivially
    does).
    """
    if f.val_score is None:
        raise ValueError("base validation metric unavailable")
    m0 = f.val_score
    eps = spec.val_tolerance
    X_val, y_val = P_val
    X_q = np.asarray(Q_pseudo[0], dtype=np.float64)
    n_q = X_q.shape[0]
    n_p = np.asarray(P_train[0]).shape[0]

    if n_q == 0:
        lam = 1.0
        steps_per_epoch = 1
    else:
        bpe = batches_per_epoch(config, n_p, n_q)
        lam = lambda_weight(n_q, bpe)
        steps_per_epoch = bpe if config.kind == "mlp" else 1

    budget = spec.max_opt_steps
    current = f
    last_good = f
    for _ in range(spec.max_epochs_per_cdc):
        if budget is not None and budget <= 0:
            break
        current = fit_disagreeing(
            config, current, P_train, P_val, Q_pseudo, lam, rng,
            epochs=1, max_steps=budget)
        if budget is not None:
            budget -= min(steps_per_epoch, budget)
        metric = evaluate_metric(current, X_val, y_val, config.val_metric)
        if metric >= m0 - eps:
            last_good = current
        else:
            break
    assert evaluate_metric(last_good, X_val, y_val, config.val_metric) \
        >= m0 - eps or last_good is f
    return last_good


def build_ensemble(config: LearnerConfig, P_train, P_val, target_X,
                   f: Model, spec: CdcTrainSpec, rng: RngStream
                   ) -> CdcEnsemble:
    """Train CDCs until the target set is fully disagreed on or the
    ensemble cap is reached.

    After each member, samples where any member's prediction differs from
    the base model's leave the surviving set; phi is the disagreed-on
    fraction after each round and is non-decreasing by construction.
    """
    target_X = np.asarray(target_X, dtype=np.float64)
    n_q = target_X.shape[0]
    if n_q == 0:
        raise ValueError("target set must be nonempty")
    pseudo = pseudo_label(f, target_X)
    surviving = np.arange(n_q)
    ensemble = CdcEnsemble(base=f, surviving_indices=surviving,
                           target_size=n_q)
    while surviving.size > 0 and len(ensemble.members) < spec.ensemble_max:
        g = train_cdc(config, P_train, P_val,
                      (target_X[surviving], pseudo[surviving]),
                      f, spec, rng)
        preds = g.predict_labels(target_X[surviving])
        surviving = surviving[preds == pseudo[surviving]]
        ensemble.members.append(g)
        ensemble.per_round_phi.append(1.0 - surviving.size / n_q)
    ensemble.surviving_indices = surviving
    return ensemble


def cdc_entropy(ensemble: CdcEnsemble, X):
    """Prediction entropy of the ensemble-mean class probabilities.

    p_hat averages the base model and every member; entropy is natural-log
    and lies in [0, log N].  Accepts a single row or a matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    models = ensemble.all_models()
    p_hat = models[0].predict_proba_matrix(X)
    for m in models[1:]:
        p_hat = p_hat + m.predict_proba_matrix(X)
    p_hat /= len(models)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_hat > 0.0, p_hat * np.log(p_hat), 0.0)
    ent = -terms.sum(axis=1)
    return float(ent[0]) if single else ent


def ensemble_to_doc(ensemble: CdcEnsemble) -> dict:
    return {
        "base": model_to_doc(ensemble.base),
        "members": [model_to_doc(m) for m in ensemble.members],
        "per_round_phi": list(ensemble.per_round_phi),
        "surviving_indices": [int(i) for i in ensemble.surviving_indices],
        "target_size": ensemble.target_size,
    }


def ensemble_from_doc(doc: dict) -> CdcEnsemble:
    return CdcEnsemble(
        base=doc_to_model(doc["base"]),
        members=[doc_to_model(m) for m in doc["members"]],
        per_round_phi=list(doc["per_round_phi"]),
        surviving_indices=np.asarray(doc["surviving_indices"], dtype=np.int64),
        target_size=doc["target_size"],
    )
