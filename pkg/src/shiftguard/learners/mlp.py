"""Small fully-connected network trained with backprop and Adam.

ReLU hidden layers with inverted dropout, feature standardization fit on
the training rows, snapshot selection by validation score with patience
early stopping.  Dropout is disabled at prediction time.
"""

from __future__ import annotations

import copy

import numpy as np

from ..losses import cdc_batch_loss, cross_entropy_batch
from ..numerics import RngStream, softmax_rows
from . import (
    LearnerConfig,
    Model,
    _decode_array,
    _encode_array,
    auc_binary,
)

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


class MlpModel(Model):
    kind = "mlp"

    def __init__(self, weights, biases, mean, std, num_classes, feature_dim,
                 training_seed, val_score=None):
        self.weights = weights
        self.biases = biases
        self.mean = mean
        self.std = std
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.training_seed = tuple(training_seed)
        self.val_score = val_score
        self._opt_state = None  # transient Adam moments for warm restarts

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = self._check_matrix(X)
        h = (X - self.mean) / self.std
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        return softmax_rows(self.logits(X))

    def clone(self) -> "MlpModel":
        m = MlpModel(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.mean.copy(), self.std.copy(),
            self.num_classes, self.feature_dim,
            self.training_seed, self.val_score)
        if self._opt_state is not None:
            m._opt_state = copy.deepcopy(self._opt_state)
        return m


def _init_params(dims, rng: RngStream):
    # He init for hidden layers; zero-init head so early logits are
    # bias-dominated rather than init noise
    weights, biases = [], []
    last = len(dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == last:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            weights.append(rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _forward_train(X, weights, biases, dropout_rate, rng: RngStream):
    """Forward pass with inverted dropout; returns logits and the
    activations/masks needed for backprop."""
    acts = [X]
    masks = []
    h = X
    for W, b in zip(weights[:-1], biases[:-1]):
        h = np.maximum(h @ W + b, 0.0)
        if dropout_rate > 0.0:
            mask = (rng.uniform(h.shape) >= dropout_rate) / (1.0 - dropout_rate)
            h = h * mask
        else:
            mask = None
        masks.append(mask)
        acts.append(h)
    logits = h @ weights[-1] + biases[-1]
    return logits, acts, masks


def _backward(dlogits, acts, masks, weights, l2):
    """Gradients of the batch loss wrt every weight and bias."""
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = dlogits
    for layer in range(len(weights) - 1, -1, -1):
        grads_w[layer] = acts[layer].T @ delta
        if l2 > 0.0:
            grads_w[layer] += l2 * weights[layer]
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ weights[layer].T
            if masks[layer - 1] is not None:
                delta = delta * masks[layer - 1]
            delta = delta * (acts[layer] > 0.0)
    return grads_w, grads_b


class _Adam:
    def __init__(self, weights, biases, lr):
        self.lr = lr
        self.t = 0
        self.m_w = [np.zeros_like(W) for W in weights]
        self.v_w = [np.zeros_like(W) for W in weights]
        self.m_b = [np.zeros_like(b) for b in biases]
        self.v_b = [np.zeros_like(b) for b in biases]

    def step(self, weights, biases, grads_w, grads_b):
        self.t += 1
        bc1 = 1.0 - _ADAM_B1 ** self.t
        bc2 = 1.0 - _ADAM_B2 ** self.t
        for i in range(len(weights)):
            for param, grad, m, v in (
                    (weights[i], grads_w[i], self.m_w[i], self.v_w[i]),
                    (biases[i], grads_b[i], self.m_b[i], self.v_b[i])):
                m *= _ADAM_B1
                m += (1.0 - _ADAM_B1) * grad
                v *= _ADAM_B2
                v += (1.0 - _ADAM_B2) * grad * grad
                param -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)


def _standardizer(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def _val_score(model: MlpModel, X_val, y_val, metric: str) -> float:
    if metric == "auc" and model.num_classes == 2:
        return auc_binary(model.predict_proba_matrix(X_val)[:, 1], y_val)
    return float(np.mean(model.predict_labels(X_val) == y_val))


def _val_ce(model: MlpModel, X_val, y_val) -> float:
    losses, _ = cross_entropy_batch(model.logits(X_val), y_val)
    return float(losses.mean())


def fit_mlp(config: LearnerConfig, X, y, w, X_val, y_val, n_classes,
            rng: RngStream) -> MlpModel:
    cfg = config.mlp
    n, d = X.shape
    mean, std = _standardizer(X)
    Xs = (X - mean) / std
    dims = [d, *cfg.hidden_sizes, n_classes]
    weights, biases = _init_params(dims, rng)
    optimizer = _Adam(weights, biases, cfg.learning_rate)

    model = MlpModel(weights, biases, mean, std, n_classes, d,
                     (rng.base_seed, rng.stream_id))
    best = model.clone()
    best_score = _val_score(model, X_val, y_val, config.val_metric)
    best_ce = _val_ce(model, X_val, y_val)
    since_best = 0

    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, acts, masks = _forward_train(
                Xs[idx], weights, biases, cfg.dropout_rate, rng)
            _, grads = cross_entropy_batch(logits, y[idx])
            wb = w[idx]
            dlogits = grads * (wb / wb.sum())[:, None]
            g_w, g_b = _backward(dlogits, acts, masks, weights, cfg.l2)
            optimizer.step(weights, biases, g_w, g_b)
        score = _val_score(model, X_val, y_val, config.val_metric)
        ce = _val_ce(model, X_val, y_val)
        # ties on the (small-sample) score break toward lower val loss so
        # the kept snapshot is the best-margined one, not the earliest
        if score > best_score or (score == best_score and ce < best_ce):
            best_score = score
            best_ce = ce
            best = model.clone()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    best.val_score = best_score
    return best


def fit_disagreeing_mlp(config: LearnerConfig, base: MlpModel, X_p, y_p,
                        X_q, pseudo, lam, rng: RngStream, epochs=1,
                        max_steps=None) -> MlpModel:
    cfg = config.mlp
    model = base.clone()
    weights, biases = model.weights, model.biases
    if model._opt_state is None:
        model._opt_state = _Adam(weights, biases, cfg.learning_rate)
    else:
        # chained warm restart: keep the accumulated Adam moments
        model._opt_state.lr = cfg.learning_rate
    optimizer = model._opt_state

    n_p = X_p.shape[0]
    n_q = X_q.shape[0]
    Xs_p = (X_p - model.mean) / model.std
    steps = 0
    if n_q == 0:
        # degenerate input: plain continued training on P only
        for _ in range(epochs):
            order = rng.permutation(n_p)
            for start in range(0, n_p, cfg.batch_size):
                if max_steps is not None and steps >= max_steps:
                    return model
                idx = order[start:start + cfg.batch_size]
                logits, acts, masks = _forward_train(
                    Xs_p[idx], weights, biases, cfg.dropout_rate, rng)
                _, grads = cross_entropy_batch(logits, y_p[idx])
                dlogits = grads / idx.size
                g_w, g_b = _backward(dlogits, acts, masks, weights, cfg.l2)
                optimizer.step(weights, biases, g_w, g_b)
                steps += 1
        return model

    Xs_q = (X_q - model.mean) / model.std
    fill = max(cfg.batch_size - n_q, 1)
    disagree = np.concatenate(
        [np.zeros(fill, dtype=bool), np.ones(n_q, dtype=bool)])
    for _ in range(epochs):
        order = rng.permutation(n_p)
        for start in range(0, n_p, fill):
            if max_steps is not None and steps >= max_steps:
                return model
            idx = order[start:start + fill]
            Xb = np.vstack([Xs_p[idx], Xs_q])
            labels = np.concatenate([y_p[idx], pseudo])
            dis = disagree[fill - idx.size:] if idx.size < fill else disagree
            logits, acts, masks = _forward_train(
                Xb, weights, biases, cfg.dropout_rate, rng)
            _, dlogits = cdc_batch_loss(
                logits, labels, np.ones(Xb.shape[0]), dis, lam)
            g_w, g_b = _backward(dlogits, acts, masks, weights, cfg.l2)
            optimizer.step(weights, biases, g_w, g_b)
            steps += 1
    return model


# ---------------------------------------------------------------------------
# serialization body
# ---------------------------------------------------------------------------

def mlp_body(model: MlpModel) -> dict:
    return {
        "weights": [_encode_array(W) for W in model.weights],
        "biases": [_encode_array(b) for b in model.biases],
        "mean": _encode_array(model.mean),
        "std": _encode_array(model.std),
    }


def mlp_from_doc(doc: dict) -> MlpModel:
    header, body = doc["header"], doc["body"]
    return MlpModel(
        [_decode_array(w) for w in body["weights"]],
        [_decode_array(b) for b in body["biases"]],
        _decode_array(body["mean"]),
        _decode_array(body["std"]),
        header["num_classes"],
        header["feature_dim"],
        tuple(header["training_seed"]),
        header["val_score"],
    )
