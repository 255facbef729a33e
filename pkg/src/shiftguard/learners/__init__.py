"""Pluggable classifier training behind one contract.

Two concrete learners: a small MLP trained by mini-batch gradient descent
with an adaptive-moment optimizer, and gradient-boosted decision trees
with per-sample weights (the replication scheme needs exact weighting
semantics, which is why boosting is implemented here rather than wrapped).
Both support warm-started disagreement training.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "MlpConfig",
    "GbtConfig",
    "LearnerConfig",
    "Model",
    "fit",
    "predict_proba",
    "fit_disagreeing",
    "batches_per_epoch",
    "accuracy",
    "auc_binary",
    "evaluate_metric",
    "model_to_doc",
    "doc_to_model",
    "save_model",
    "load_model",
    "model_fingerprint",
    "config_to_dict",
]

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (16, 16, 16)
    dropout_rate: float = 0.3
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    batch_size: int = 64
    l2: float = 0.0
    patience: int = 100

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size, patience must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass(frozen=True)
class GbtConfig:
    eta: float = 0.1
    max_depth: int = 6
    num_rounds: int = 10
    subsample: float = 0.8
    colsample: float = 0.8
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    # scale on top of lambda * |P_train| for replica weights during
    # disagreement rounds; boosting has no batch structure, so the
    # gradient-path lambda is rescaled to per-round exposure
    disagree_scale: float = 1.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must be in (0, 1]")
        if not 0.0 < self.colsample <= 1.0:
            raise ValueError("colsample must be in (0, 1]")
        if self.min_child_weight < 0 or self.reg_lambda < 0:
            raise ValueError("min_child_weight and reg_lambda must be >= 0")
        if self.disagree_scale <= 0:
            raise ValueError("disagree_scale must be positive")


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "mlp"
    mlp: MlpConfig = field(default_factory=MlpConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    val_metric: str = "accuracy"  # "accuracy" | "auc" (auc: binary only)

    def __post_init__(self):
        if self.kind not in ("mlp", "gbt"):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.val_metric not in ("accuracy", "auc"):
            raise ValueError(f"unknown val_metric {self.val_metric!r}")


class Model:
    """Trained classifier: per-class probabilities over fixed-width rows.

    Immutable after fit; argmax with lowest-index tie-breaking defines the
    predicted label.
    """

    kind: str = "?"
    num_classes: int
    feature_dim: int
    training_seed: tuple[int, int]
    val_score: float | None

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] != self.feature_dim:
            raise ValueError(
                f"expected feature vector of dimension {self.feature_dim}, "
                f"got shape {x.shape}")
        return self.predict_proba_matrix(x[None, :])[0]

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba_matrix(X), axis=1)

    def _check_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise ValueError(
                f"expected (n, {self.feature_dim}) feature matrix, "
                f"got shape {X.shape}")
        return X


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict_labels(X) == np.asarray(y)))


def auc_binary(scores: np.ndarray, y: np.ndarray) -> float:
    """Rank-based AUROC with average ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(y.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def evaluate_metric(model: Model, X: np.ndarray, y: np.ndarray,
                    metric: str) -> float:
    if metric == "accuracy":
        return accuracy(model, X, y)
    if metric == "auc":
        if model.num_classes != 2:
            raise ValueError("auc metric requires binary classification")
        return auc_binary(model.predict_proba_matrix(X)[:, 1], y)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# fit / predict dispatch
# ---------------------------------------------------------------------------

def _validate_training_inputs(X, y, sample_weight):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set must be a nonempty (n, d) matrix")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must align with feature rows")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    if sample_weight is None:
        w = np.ones(X.shape[0])
    else:
        w = np.asarray(sample_weight, dtype=np.float64)
        if w.shape != (X.shape[0],):
            raise ValueError("sample_weight must align with rows")
        if np.any(w <= 0):
            raise ValueError("sample weights must be positive")
    return X, y, w


def fit(config: LearnerConfig, X, y, X_val, y_val, rng,
        sample_weight=None, num_classes: int | None = None) -> Model:
    """Train a classifier; records the validation score used later as the
    disagreement-training constraint."""
    X, y, w = _validate_training_inputs(X, y, sample_weight)
    n_classes = int(num_classes if num_classes is not None else y.max() + 1)
    if y.max() >= n_classes:
        raise ValueError("label out of range")
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if config.kind == "mlp":
        from . import mlp
        return mlp.fit_mlp(config, X, y, w, X_val, y_val, n_classes, rng)
    from . import gbt
    return gbt.fit_gbt(config, X, y, w, X_val, y_val, n_classes, rng)


def predict_proba(model: Model, x) -> np.ndarray:
    """Class-probability vector for one feature row."""
    return model.predict_proba(x)


def batches_per_epoch(config: LearnerConfig, n_train: int, n_q: int) -> int:
    """Number of Q-filled batches in one pass over the training rows.

    Every disagreement batch carries all of Q topped up with fresh
    training rows, so the P side is consumed ``fill`` rows at a time.
    For GBT one round sees everything once: a single "batch".
    """
    if config.kind == "gbt":
        return 1
    fill = max(config.mlp.batch_size - n_q, 1)
    return max(1, -(-n_train // fill))


def fit_disagreeing(config: LearnerConfig, base: Model, P_train, P_val,
                    Q, lam: float, rng, epochs: int = 1,
                    max_steps: int | None = None) -> Model:
    """Continue training ``base`` to agree on P and disagree on Q.

    P_train/P_val are (X, y) pairs with true labels; Q is (X, pseudo)
    where pseudo labels are the base model's own predictions.  MLP path:
    warm-started gradient descent on the combined agree/disagree batch
    loss, every batch containing all of Q.  GBT path: replicas of each Q
    sample (one per non-pseudo class, weights lam * |P_train| *
    disagree_scale / (N-1)) appended to P, boosting continued from the
    base model's trees.  Empty Q degenerates to plain continued training
    on P only.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    X_p, y_p = np.asarray(P_train[0], np.float64), np.asarray(P_train[1], np.int64)
    X_q = np.asarray(Q[0], dtype=np.float64)
    pseudo = np.asarray(Q[1], dtype=np.int64)
    if X_q.shape[0] != pseudo.shape[0]:
        raise ValueError("pseudo labels must align with Q rows")
    if config.kind == "mlp":
        from . import mlp
        return mlp.fit_disagreeing_mlp(
            config, base, X_p, y_p, X_q, pseudo, lam, rng,
            epochs=epochs, max_steps=max_steps)
    from . import gbt
    return gbt.fit_disagreeing_gbt(
        config, base, X_p, y_p, X_q, pseudo, lam, rng,
        epochs=epochs, max_steps=max_steps)


# ---------------------------------------------------------------------------
# serialization: versioned JSON document with base64 array payloads
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=doc["dtype"]).reshape(doc["shape"]).copy()


def model_to_doc(model: Model) -> dict:
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "training_seed": list(model.training_seed),
        "val_score": model.val_score,
    }
    if model.kind == "mlp":
        from . import mlp
        body = mlp.mlp_body(model)
    elif model.kind == "gbt":
        from . import gbt
        body = gbt.gbt_body(model)
    else:
        raise ValueError(f"cannot serialize model kind {model.kind!r}")
    return {"header": header, "body": body}


def doc_to_model(doc: dict) -> Model:
    header = doc["header"]
    if header["format_version"] != MODEL_FORMAT_VERSION:
        raise ValueError(
            f"unsupported model format version {header['format_version']}")
    if header["kind"] == "mlp":
        from . import mlp
        return mlp.mlp_from_doc(doc)
    if header["kind"] == "gbt":
        from . import gbt
        return gbt.gbt_from_doc(doc)
    raise ValueError(f"unknown model kind {header['kind']!r}")


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_doc(model), fh, sort_keys=True)


def load_model(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        return doc_to_model(json.load(fh))


def model_fingerprint(model: Model) -> str:
    payload = json.dumps(model_to_doc(model), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def config_to_dict(config: LearnerConfig) -> dict:
    d = asdict(config)
    d["mlp"]["hidden_sizes"] = list(config.mlp.hidden_sizes)
    return d
