import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cran_harq import predictors
from cran_harq.harqeval import roc_points
from cran_harq.predictors import (ACK, NACK, DistributedPredictor, LabeledPairs, LogisticModel,
                                  PredictorError, Quantizer, ThresholdRule, build_scheme,
                                  calibrate_threshold, decide, lr_predict, lr_train, quantize,
                                  threshold_decide, ue_combine)


def weighted_objective(b0, b1, x, y, c, lam):
    z = b0 + b1 * x
    return np.sum(c * (np.logaddexp(0.0, z) - y * z)) + 0.5 * lam * b1 ** 2


def synthetic_pairs(n, seed, id_offset=0, scheme="LR-LLR"):
    """Two noisy views of a latent decodability margin."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=n)
    y = (m + 0.3 * rng.normal(size=n) > 0).astype(int)
    if scheme == "TH-SNR":
        x1 = np.exp(m + 0.5 * rng.normal(size=n))[:, None]
        x2 = np.exp(m + 0.5 * rng.normal(size=n))[:, None]
    elif scheme == "TH-LLR":
        x1 = (0.25 - 0.1 * np.tanh(m + 0.5 * rng.normal(size=n)))[:, None]
        x2 = (0.25 - 0.1 * np.tanh(m + 0.5 * rng.normal(size=n)))[:, None]
    else:
        x1 = m[:, None] + rng.normal(size=(n, 3))
        x2 = m[:, None] + rng.normal(size=(n, 3))
    return LabeledPairs(x1, x2, y, ids=np.arange(n) + id_offset)


class TestLogistic:
    def test_separable_grid_oracle(self):
        x = np.repeat([-1.0, 1.0], 100)
        y = np.repeat([ACK, NACK], 100)
        m = lr_train(x, y, l2_strength=1.0, standardize=False)
        assert np.mean((lr_predict(m, x) >= 0.5) == (y == ACK)) == 1.0
        # grid-search oracle over (b0, b1): our optimum is at least as good as any grid point
        c = np.ones(200)
        ours = weighted_objective(m.intercept, m.weights[0], x, y, c, 1.0)
        grid = min(weighted_objective(b0, b1, x, y, c, 1.0)
                   for b0 in np.linspace(-2, 2, 81) for b1 in np.linspace(-12, 0, 241))
        assert ours <= grid + 1e-9
        assert m.grad_norm <= 1e-6

    def test_separable_standardized(self):
        x = np.repeat([-1.0, 1.0], 100)
        y = np.repeat([ACK, NACK], 100)
        m = lr_train(x, y)
        assert np.mean((lr_predict(m, x) >= 0.5) == (y == ACK)) == 1.0

    def test_zero_features(self):
        y = np.array([ACK] * 30 + [NACK] * 70)
        m = lr_train(np.zeros((100, 2)), y)
        np.testing.assert_allclose(m.weights, 0.0, atol=1e-12)
        assert abs(m.intercept) <= 1e-9

    def test_regularization_shrinks(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(300, 3))
        y = (X @ [1.0, -2.0, 0.5] + rng.normal(size=300) > 0).astype(int)
        norms = [np.linalg.norm(lr_train(X, y, lam).weights) for lam in (1, 10, 100, 1e4)]
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_balanced_weights(self):
        y = np.array([ACK] * 10 + [NACK] * 30)
        m = lr_train(np.random.default_rng(1).normal(size=(40, 1)), y)
        np.testing.assert_allclose(m.class_weights, (2.0, 40 / 60))

    def test_errors(self):
        with pytest.raises(PredictorError):
            lr_train(np.zeros((5, 1)), np.ones(5))
        with pytest.raises(PredictorError):
            lr_train(np.array([[np.nan], [1.0]]), [0, 1])

    def test_predict_values(self):
        assert lr_predict(LogisticModel(0.0, [0.0, 0.0]), [[3.0, -1.0]])[0] == 0.5
        np.testing.assert_allclose(lr_predict(LogisticModel(np.log(3), [0.0]), [[7.0]]), 0.75)
        p = lr_predict(LogisticModel(0.1, [2.0]), np.linspace(-3, 3, 20)[:, None])
        assert np.all(np.diff(p) > 0)

    def test_predict_dim_mismatch(self):
        with pytest.raises(PredictorError):
            lr_predict(LogisticModel(0.0, [1.0, 1.0]), [[1.0]])


class TestQuantize:
    def test_endpoints_and_example(self):
        q = Quantizer(4, 2.0, 4.0)
        assert quantize(q, 2.0)[0] == 0
        assert quantize(q, 4.0)[0] == 15
        lvl, deq = quantize(q, 2.0 + 0.37 * 2.0)
        assert lvl == 6 and deq == 6 / 15

    def test_clamp(self):
        q = Quantizer(3, 0.0, 1.0)
        np.testing.assert_array_equal(quantize(q, [-5.0, 5.0])[0], [0, 7])

    def test_degenerate(self):
        with pytest.raises(PredictorError):
            Quantizer(4, 1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200), st.integers(1, 8))
    def test_cardinality_and_error(self, xs, b):
        x = np.asarray(xs)
        if not x.max() > x.min():
            return
        q = Quantizer.calibrate(x, b)
        lvl, deq = quantize(q, x)
        assert len(np.unique(lvl)) <= 2 ** b
        u = (x - q.lo) / (q.hi - q.lo)
        err = np.max(np.abs(deq - u))
        assert err <= 0.5 / (2 ** b - 1) + 1e-12
        # one more bit never increases the worst-case error on these samples
        deq2 = quantize(Quantizer(b + 1, q.lo, q.hi), x)[1]
        assert np.max(np.abs(deq2 - u)) <= 0.5 / (2 ** b - 1) + 1e-12


class TestThreshold:
    def test_boundary(self):
        r = ThresholdRule(0.2)
        assert threshold_decide(r, 0.2) == ACK
        assert threshold_decide(r, 0.2 + 1e-12) == NACK

    def test_randomized_needs_rng(self):
        with pytest.raises(PredictorError):
            threshold_decide(ThresholdRule(0.0, 0.5), [0.0])
        d = threshold_decide(ThresholdRule(0.0, 1.0), [0.0, -1.0], np.random.default_rng(0))
        np.testing.assert_array_equal(d, [NACK, ACK])

    def test_sweep_traces_monotone_roc(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 2, 500)
        T = rng.normal(size=500) - y  # larger T means less decodable
        cs = np.concatenate([[-np.inf], np.sort(T), [np.inf]])
        alpha, beta = [], []
        for C in cs:
            d = threshold_decide(ThresholdRule(C), T)
            alpha.append(np.mean(d[y == NACK] == ACK))
            beta.append(np.mean(d[y == ACK] == NACK))
        assert alpha[0] == 0 and beta[0] == 1 and alpha[-1] == 1 and beta[-1] == 0
        assert np.all(np.diff(alpha) >= 0) and np.all(np.diff(beta) <= 0)

    def test_calibrated_rule_balanced_accuracy_oracle(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 2, 300)
        T = rng.normal(size=300) - 1.5 * y
        rule = calibrate_threshold(T, y)

        def bal(C):
            d = np.where(T > C, NACK, ACK)
            return 0.5 * (np.mean(d[y == ACK] == ACK) + np.mean(d[y == NACK] == NACK))

        assert abs(bal(rule.C) - max(bal(c) for c in T)) <= 1e-12


class TestCombine:
    def test_tie_is_ack(self):
        comb = LogisticModel(-0.5, [0.5, 0.5])
        d, s = ue_combine(comb, 0.5, 0.5)
        assert s[0] == 0.5 and d[0] == ACK

    def test_saturation(self):
        comb = LogisticModel(0.0, [5.0, 5.0])
        fb = np.linspace(-1, 1, 11)
        assert np.all(ue_combine(comb, fb, fb, s=0.5)[0] == NACK)
        assert np.all(ue_combine(comb, fb, fb, s=1.0)[0] == NACK)
        assert np.all(ue_combine(comb, fb, fb, s=-0.5)[0] == ACK)

    def test_untrained(self):
        with pytest.raises(PredictorError):
            ue_combine(None, 0.1, 0.2)

    def test_affine_rescaling_invariance(self):
        rng = np.random.default_rng(5)
        f1, f2 = rng.integers(0, 16, (2, 400)) / 15
        y = (f1 + f2 + 0.3 * rng.normal(size=400) > 1).astype(int)
        a = lr_train(np.column_stack([f1, f2]), y)
        g1, g2 = 3.0 * f1 - 2.0, 0.5 * f2 + 7.0
        b = lr_train(np.column_stack([g1, g2]), y)
        for s in (-0.2, 0.0, 0.1):
            np.testing.assert_array_equal(ue_combine(a, f1, f2, s)[0], ue_combine(b, g1, g2, s)[0])

    def test_decide_vector_bias_boundary(self):
        np.testing.assert_array_equal(decide([0.49, 0.5, 0.51]), [NACK, ACK, ACK])


class TestBuildScheme:
    @pytest.mark.parametrize("scheme", ["TH-SNR", "TH-LLR", "LR-LLR", "LR-SC"])
    def test_schemes_learn(self, scheme):
        tr = synthetic_pairs(2000, 0, 0, scheme)
        va = synthetic_pairs(1000, 1, 10 ** 6, scheme)
        te = synthetic_pairs(2000, 2, 2 * 10 ** 6, scheme)
        pred = build_scheme(scheme, tr, va, fb_bits=4)
        s = pred.score(te.x1, te.x2)
        a, b = roc_points(s, te.y, [0.5])
        assert a[0] + b[0] < 0.5
        kind = {"TH-SNR": "lr_db", "TH-LLR": "stat"}.get(scheme, "lr")
        assert pred.local[0].kind == kind

    def test_feedback_cardinality(self):
        tr, va = synthetic_pairs(1000, 0), synthetic_pairs(500, 1, 10 ** 6)
        pred = build_scheme("LR-LLR", tr, va, fb_bits=2)
        fb = pred.feedback(0, synthetic_pairs(3000, 9).x1)
        assert len(np.unique(fb)) <= 4

    def test_split_discipline(self, monkeypatch):
        tr, va = synthetic_pairs(800, 0), synthetic_pairs(300, 1, 10 ** 6)
        calls = []
        real = predictors.lr_train

        def spy(X, y, *a, **k):
            calls.append(len(y))
            return real(X, y, *a, **k)

        monkeypatch.setattr(predictors, "lr_train", spy)
        pred = build_scheme("LR-LLR", tr, va)
        assert calls == [800, 800, 300]  # two local maps on training rows, combiner on validation rows
        assert not np.intersect1d(pred.train_ids, pred.val_ids).size
        np.testing.assert_array_equal(pred.val_ids, va.ids)

    def test_overlap_rejected(self):
        with pytest.raises(PredictorError):
            build_scheme("LR-LLR", synthetic_pairs(200, 0), synthetic_pairs(200, 1))

    def test_single_class_rejected(self):
        tr = synthetic_pairs(200, 0)
        va = synthetic_pairs(200, 1, 1000)
        va.y[:] = ACK
        with pytest.raises(PredictorError):
            build_scheme("LR-LLR", tr, va)

    def test_dida_not_classical(self):
        with pytest.raises(PredictorError):
            build_scheme("DIDA", synthetic_pairs(200, 0), synthetic_pairs(200, 1, 1000))

    def test_json_roundtrip_bit_exact(self, tmp_path):
        pred = build_scheme("LR-SC", synthetic_pairs(600, 0), synthetic_pairs(300, 1, 10 ** 6), fb_bits=8)
        te = synthetic_pairs(500, 3)
        p = tmp_path / "m.json"
        pred.save(p)
        back = DistributedPredictor.load(p)
        np.testing.assert_array_equal(back.score(te.x1, te.x2), pred.score(te.x1, te.x2))

    def test_version_checked(self, tmp_path):
        pred = build_scheme("TH-LLR", synthetic_pairs(600, 0, 0, "TH-LLR"),
                            synthetic_pairs(300, 1, 10 ** 6, "TH-LLR"))
        d = pred.to_dict()
        d["version"] = 99
        with pytest.raises(PredictorError):
            DistributedPredictor.from_dict(json.loads(json.dumps(d)))
