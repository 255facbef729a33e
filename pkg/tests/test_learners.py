import numpy as np
import pytest

from conftest import separable_blob, small_gbt_config, small_mlp_config
from oracles import central_difference_grad
from shiftguard.learners import (
    GbtConfig,
    LearnerConfig,
    MlpConfig,
    auc_binary,
    batches_per_epoch,
    doc_to_model,
    fit,
    fit_disagreeing,
    load_model,
    model_fingerprint,
    model_to_doc,
    predict_proba,
    save_model,
)
from shiftguard.learners.gbt import GbtModel
from shiftguard.learners.mlp import MlpModel, _backward, _forward_train
from shiftguard.losses import cross_entropy_batch, lambda_weight
from shiftguard.numerics import rng_stream

ALL_CONFIGS = [small_mlp_config(), small_gbt_config()]


def split_blob(X, y, n_val=50):
    return X[:-n_val], y[:-n_val], X[-n_val:], y[-n_val:]


@pytest.fixture(scope="module")
def blob():
    return separable_blob()


@pytest.fixture(scope="module", params=["mlp", "gbt"])
def fitted(request, blob):
    X, y = blob
    config = small_mlp_config() if request.param == "mlp" else small_gbt_config()
    Xt, yt, Xv, yv = split_blob(X, y)
    model = fit(config, Xt, yt, Xv, yv, rng_stream(0, 0))
    return config, model, (Xt, yt, Xv, yv)


class TestFit:
    def test_separable_blob_validation_accuracy(self, fitted):
        _, model, (_, _, Xv, yv) = fitted
        acc = np.mean(model.predict_labels(Xv) == yv)
        assert acc >= 0.99
        assert model.val_score is not None and model.val_score >= 0.99

    @pytest.mark.parametrize("config", ALL_CONFIGS, ids=["mlp", "gbt"])
    def test_constant_label_dataset(self, config):
        rng = rng_stream(3, 0)
        X = rng.normal((60, 3))
        y = np.full(60, 2, dtype=np.int64)
        model = fit(config, X, y, X[:10], y[:10], rng_stream(3, 1),
                    num_classes=4)
        probe = rng.normal((40, 3))
        assert np.all(model.predict_labels(probe) == 2)

    @pytest.mark.parametrize("config", ALL_CONFIGS, ids=["mlp", "gbt"])
    def test_deterministic_given_seed(self, config, blob):
        X, y = blob
        Xt, yt, Xv, yv = split_blob(X, y)
        probe = rng_stream(4, 0).normal((30, 2)) * 3
        a = fit(config, Xt, yt, Xv, yv, rng_stream(7, 5))
        b = fit(config, Xt, yt, Xv, yv, rng_stream(7, 5))
        np.testing.assert_array_equal(a.predict_proba_matrix(probe),
                                      b.predict_proba_matrix(probe))

    def test_empty_train_errors(self):
        with pytest.raises(ValueError):
            fit(small_gbt_config(), np.empty((0, 2)), np.empty(0, np.int64),
                np.zeros((1, 2)), np.zeros(1, np.int64), rng_stream(0, 0))

    def test_label_out_of_range_errors(self, blob):
        X, y = blob
        with pytest.raises(ValueError):
            fit(small_gbt_config(), X, y, X, y, rng_stream(0, 0),
                num_classes=1)

    def test_nonpositive_weight_errors(self, blob):
        X, y = blob
        w = np.ones(len(y))
        w[3] = 0.0
        with pytest.raises(ValueError):
            fit(small_gbt_config(), X, y, X, y, rng_stream(0, 0),
                sample_weight=w)


class TestPredictProba:
    def test_valid_probability_rows(self, fitted):
        _, model, _ = fitted
        probe = rng_stream(5, 0).normal((1000, 2)) * 4
        P = model.predict_proba_matrix(probe)
        assert np.all(P >= 0) and np.all(P <= 1)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    def test_single_vector_interface(self, fitted):
        _, model, _ = fitted
        p = predict_proba(model, np.zeros(2))
        assert p.shape == (model.num_classes,)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)

    def test_dimension_mismatch_errors(self, fitted):
        _, model, _ = fitted
        with pytest.raises(ValueError):
            predict_proba(model, np.zeros(5))

    def test_zero_weight_mlp_is_uniform(self):
        model = MlpModel(
            weights=[np.zeros((2, 4)), np.zeros((4, 3))],
            biases=[np.zeros(4), np.zeros(3)],
            mean=np.zeros(2), std=np.ones(2),
            num_classes=3, feature_dim=2, training_seed=(0, 0))
        np.testing.assert_allclose(
            model.predict_proba(np.array([1.0, -2.0])), [1 / 3] * 3)

    def test_zero_round_gbt_predicts_prior(self):
        from shiftguard.learners.gbt import _log_prior
        y = np.array([0] * 30 + [1] * 10)
        prior = np.array([0.75, 0.25])  # class frequencies of the set
        model = GbtModel(_log_prior(y, np.ones(40), 2), [], 2, 2, (0, 0))
        probe = rng_stream(6, 0).normal((20, 2))
        np.testing.assert_allclose(
            model.predict_proba_matrix(probe),
            np.tile(prior, (20, 1)), atol=1e-12)

    def test_mlp_auc_validation_metric(self, blob):
        X, y = blob
        Xt, yt, Xv, yv = split_blob(X, y)
        config = small_mlp_config()
        config = LearnerConfig(kind="mlp", mlp=config.mlp, val_metric="auc")
        model = fit(config, Xt, yt, Xv, yv, rng_stream(30, 0))
        assert model.val_score >= 0.99  # recorded score is now the AUC


class TestMlpInternals:
    def test_full_network_gradient_matches_finite_differences(self):
        rng = rng_stream(8, 0)
        X = rng.normal((6, 3))
        y = np.array([0, 1, 2, 0, 1, 2])
        weights = [rng.normal((3, 5)) * 0.5, rng.normal((5, 3)) * 0.5]
        biases = [rng.normal(5) * 0.1, rng.normal(3) * 0.1]

        def loss_at(flat):
            ws, bs, k = [], [], 0
            for W in weights:
                ws.append(flat[k:k + W.size].reshape(W.shape))
                k += W.size
            for b in biases:
                bs.append(flat[k:k + b.size])
                k += b.size
            logits, _, _ = _forward_train(X, ws, bs, 0.0, rng_stream(0, 0))
            losses, _ = cross_entropy_batch(logits, y)
            return float(losses.mean())

        logits, acts, masks = _forward_train(X, weights, biases, 0.0,
                                             rng_stream(0, 0))
        _, grads = cross_entropy_batch(logits, y)
        g_w, g_b = _backward(grads / X.shape[0], acts, masks, weights, 0.0)
        flat = np.concatenate([w.ravel() for w in weights]
                              + [b.ravel() for b in biases])
        fd = central_difference_grad(loss_at, flat)
        analytic = np.concatenate([g.ravel() for g in g_w]
                                  + [g.ravel() for g in g_b])
        err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3)
        assert err.max() < 1e-4


class TestWeightedFitting:
    def test_gbt_weight_k_equals_k_duplicates(self):
        rng = rng_stream(9, 0)
        X = rng.normal((40, 3))
        y = (X[:, 0] + 0.3 * rng.normal(40) > 0).astype(np.int64)
        config = small_gbt_config(subsample=1.0, colsample=1.0, num_rounds=5)
        X_dup = np.vstack([X, X[:5]])
        y_dup = np.concatenate([y, y[:5]])
        w = np.ones(40)
        w[:5] = 2.0
        a = fit(config, X_dup, y_dup, X[:10], y[:10], rng_stream(10, 0))
        b = fit(config, X, y, X[:10], y[:10], rng_stream(10, 0),
                sample_weight=w)
        probe = rng.normal((25, 3))
        np.testing.assert_allclose(a.predict_proba_matrix(probe),
                                   b.predict_proba_matrix(probe), atol=1e-8)

    def test_gbt_unit_weights_match_unweighted(self):
        rng = rng_stream(11, 0)
        X = rng.normal((50, 2))
        y = (X[:, 0] > 0).astype(np.int64)
        config = small_gbt_config()
        a = fit(config, X, y, X[:10], y[:10], rng_stream(12, 0))
        b = fit(config, X, y, X[:10], y[:10], rng_stream(12, 0),
                sample_weight=np.ones(50))
        probe = rng.normal((25, 2))
        np.testing.assert_array_equal(a.predict_proba_matrix(probe),
                                      b.predict_proba_matrix(probe))


class TestFitDisagreeing:
    @pytest.mark.parametrize("config", ALL_CONFIGS, ids=["mlp", "gbt"])
    def test_empty_q_stays_agreeing(self, config, blob):
        X, y = blob
        Xt, yt, Xv, yv = split_blob(X, y)
        base = fit(config, Xt, yt, Xv, yv, rng_stream(13, 0))
        probe, _ = separable_blob(n=200, seed=13)  # fresh in-distribution draw
        refit = fit_disagreeing(
            config, base, (Xt, yt), (Xv, yv),
            (np.empty((0, 2)), np.empty(0, np.int64)),
            lam=0.1, rng=rng_stream(13, 2), epochs=3)
        agree = np.mean(refit.predict_labels(probe) == base.predict_labels(probe))
        assert agree >= 0.99

    @pytest.mark.parametrize("config", ALL_CONFIGS, ids=["mlp", "gbt"])
    def test_far_shifted_q_learns_disagreement(self, config, blob):
        X, y = blob
        Xt, yt, Xv, yv = split_blob(X, y)
        base = fit(config, Xt, yt, Xv, yv, rng_stream(1, 0))
        base_val_acc = np.mean(base.predict_labels(Xv) == yv)
        # 10 points far outside the support (10 sigma along feature 1)
        rng = rng_stream(1, 1)
        Xq = rng.normal((10, 2))
        Xq[:, 1] += 10.0
        pseudo = base.predict_labels(Xq)
        lam = lambda_weight(10, batches_per_epoch(config, len(yt), 10))
        cdc = fit_disagreeing(config, base, (Xt, yt), (Xv, yv), (Xq, pseudo),
                              lam=lam, rng=rng_stream(1, 2), epochs=10)
        disagreement = np.mean(cdc.predict_labels(Xq) != pseudo)
        val_acc = np.mean(cdc.predict_labels(Xv) == yv)
        assert disagreement >= 0.9
        assert val_acc >= base_val_acc - 0.02

    def test_binary_gbt_equals_flipped_label_training(self, blob):
        # with N = 2 the replication path is exactly one flipped label per
        # Q row at the full replica weight
        X, y = blob
        Xt, yt, Xv, yv = split_blob(X, y)
        config = small_gbt_config()
        base = fit(config, Xt, yt, Xv, yv, rng_stream(2, 0))
        Xq = rng_stream(2, 1).normal((8, 2)) + 4.0
        pseudo = base.predict_labels(Xq)
        lam = lambda_weight(8, 1)
        cdc = fit_disagreeing(config, base, (Xt, yt), (Xv, yv), (Xq, pseudo),
                              lam=lam, rng=rng_stream(2, 2), epochs=4)

        from shiftguard.learners.gbt import _boost_rounds
        manual = base.clone_shallow()
        w_q = lam * len(yt) * config.gbt.disagree_scale
        X_all = np.vstack([Xt, Xq])
        y_all = np.concatenate([yt, 1 - pseudo])
        w_all = np.concatenate([np.ones(len(yt)), np.full(8, w_q)])
        _boost_rounds(manual, X_all, y_all, w_all, config.gbt,
                      rng_stream(2, 2), 4)
        probe = rng_stream(2, 3).normal((40, 2)) * 3
        np.testing.assert_allclose(cdc.predict_proba_matrix(probe),
                                   manual.predict_proba_matrix(probe),
                                   atol=1e-12)

    def test_lambda_validation(self, blob):
        X, y = blob
        config = small_gbt_config()
        base = fit(config, X, y, X[:20], y[:20], rng_stream(3, 0))
        with pytest.raises(ValueError):
            fit_disagreeing(config, base, (X, y), (X, y),
                            (X[:4], base.predict_labels(X[:4])),
                            lam=0.0, rng=rng_stream(3, 1))


class TestSerialization:
    def test_round_trip_preserves_predictions(self, fitted, tmp_path):
        _, model, _ = fitted
        path = tmp_path / "model.json"
        save_model(model, path)
        restored = load_model(path)
        probe = rng_stream(14, 0).normal((50, 2)) * 2
        np.testing.assert_array_equal(model.predict_proba_matrix(probe),
                                      restored.predict_proba_matrix(probe))
        assert restored.val_score == model.val_score
        assert restored.training_seed == model.training_seed

    def test_fingerprint_stable_and_distinguishing(self, fitted):
        config, model, (Xt, yt, Xv, yv) = fitted
        assert model_fingerprint(model) == model_fingerprint(model)
        other = fit(config, Xt, yt, Xv, yv, rng_stream(99, 1))
        assert model_fingerprint(model) != model_fingerprint(other)

    def test_doc_version_check(self, fitted):
        _, model, _ = fitted
        doc = model_to_doc(model)
        doc["header"]["format_version"] = 999
        with pytest.raises(ValueError, match="format version"):
            doc_to_model(doc)


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            MlpConfig(dropout_rate=1.0)
        with pytest.raises(ValueError):
            GbtConfig(max_depth=0)
        with pytest.raises(ValueError):
            GbtConfig(num_rounds=0)
        with pytest.raises(ValueError):
            LearnerConfig(kind="svm")

    def test_auc_metric(self):
        scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
        y = np.array([1, 1, 0, 1, 0])
        # pairs: (1,.9)(1,.8)(1,.6) vs (0,.7)(0,.5): 5 of 6 pairs correct
        assert auc_binary(scores, y) == pytest.approx(5 / 6)
        assert auc_binary(np.ones(5), y) == 0.5
