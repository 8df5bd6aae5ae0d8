import math

import numpy as np
import pytest

from collabinfer.decision import EarlyExitParams
from collabinfer.encoder import (
    CLS,
    SEP,
    EncoderConfig,
    ModelWeights,
    final_head_loss,
    forward,
    head_features,
    head_loss_and_grad,
    scaled_dot_attention,
    split_word,
    tokenize,
    train_heads,
)
from collabinfer.errors import InvalidInputError, InvalidParameterError
from collabinfer.workload import make_tasks

CFG = EncoderConfig(n_layers=4, n_heads=2, d_model=16, d_ff=32, seed=3)


def brute_attention(q, k, v, d_k):
    n, m = q.shape[0], k.shape[0]
    att = np.zeros((n, m))
    for i in range(n):
        scores = [sum(q[i, c] * k[j, c] for c in range(q.shape[1])) / math.sqrt(d_k)
                  for j in range(m)]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = sum(e)
        att[i] = [x / z for x in e]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        for c in range(v.shape[1]):
            out[i, c] = sum(att[i, j] * v[j, c] for j in range(m))
    return out, att


class TestTokenize:
    def test_word_level(self):
        seq = tokenize("good movie", CFG)
        assert seq.pieces == (CLS, "good", "movie", SEP)
        assert seq.segmentation.special == (True, False, False, True)

    def test_deterministic(self):
        a, b = tokenize("a fine film", CFG, "subword"), tokenize("a fine film", CFG, "subword")
        assert a.pieces == b.pieces and np.array_equal(a.ids, b.ids)

    def test_subword_split(self):
        seq = tokenize("unbelievable", CFG, "subword")
        assert seq.pieces[1:-1] == ("unbeli", "##evable")
        assert seq.segmentation.spans == ((1, 3),)
        assert split_word("ok", 6) == ["ok"]

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            tokenize("   ", CFG)

    def test_bad_mode(self):
        with pytest.raises(InvalidParameterError):
            tokenize("x", CFG, "char")

    def test_ids_in_range(self):
        seq = tokenize(" ".join(f"w{i}" for i in range(40)), CFG)
        assert seq.ids.min() >= 0 and seq.ids.max() < CFG.vocab_size


class TestAttention:
    def test_single_token(self):
        v = np.array([[1.5, -2.0]])
        out, att = scaled_dot_attention([[0.3, 0.1]], [[2.0, 1.0]], v, 2)
        np.testing.assert_array_equal(att, [[1.0]])
        np.testing.assert_allclose(out, v)

    def test_zero_queries_uniform(self, rng):
        k, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        out, att = scaled_dot_attention(np.zeros((2, 3)), k, v, 3)
        np.testing.assert_allclose(att, 0.2, atol=1e-15)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)

    def test_brute_force_3x4(self, rng):
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out, att = scaled_dot_attention(q, k, v, 4)
        bo, ba = brute_attention(q, k, v, 4)
        np.testing.assert_allclose(att, ba, atol=1e-9)
        np.testing.assert_allclose(out, bo, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            scaled_dot_attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), 3)


@pytest.fixture(scope="module")
def weights():
    return ModelWeights.init(CFG)


class TestForward:
    def test_shapes(self, weights):
        seq = tokenize("a quiet film with good acting", CFG)
        res = forward(seq, weights)
        assert res.executed_layers == CFG.n_layers and not res.exited_early
        assert res.attention.shape == (CFG.n_layers, CFG.n_heads, len(seq), len(seq))
        np.testing.assert_allclose(res.attention.sum(axis=-1), 1.0, atol=1e-12)
        assert len(res.layer_probs) == CFG.n_layers

    def test_deterministic(self, weights):
        seq = tokenize("the story was dull", CFG)
        a = forward(seq, ModelWeights.init(CFG))
        b = forward(seq, weights)
        assert np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.attention, b.attention)

    def test_tau_zero_runs_all_layers(self, weights):
        res = forward(tokenize("great great film", CFG), weights, EarlyExitParams(0.0, 1))
        assert res.executed_layers == CFG.n_layers and not res.exited_early

    def test_constant_heads_exit_at_layer_three(self, weights):
        # zero heads: every layer emits [0.5, 0.5], diff 0 from layer 2 on
        res = forward(tokenize("fine", CFG), weights, EarlyExitParams(0.01, 2))
        assert res.executed_layers == 3 and res.exited_early
        np.testing.assert_array_equal(res.probs, [0.5, 0.5])

    def test_over_length(self, weights):
        with pytest.raises(InvalidInputError):
            forward(np.zeros(CFG.max_len + 1, dtype=np.int64), weights)

    def test_weights_read_only(self, weights):
        with pytest.raises(ValueError):
            weights.embedding[0, 0] = 1.0


class TestSaveLoad:
    def test_round_trip_bit_exact(self, tmp_path, weights):
        rng = np.random.default_rng(1)
        w = weights.with_heads(rng.normal(size=weights.head_w.shape), rng.normal(size=weights.head_b.shape),
                               rng.normal(size=weights.final_w.shape), rng.normal(size=weights.final_b.shape))
        path = tmp_path / "w.npz"
        w.save(path)
        back = ModelWeights.load(path)
        assert back.config == w.config
        for name, a in w.arrays().items():
            assert np.array_equal(a, back.arrays()[name]), name
        seq = tokenize("an awful film", CFG)
        assert np.array_equal(forward(seq, w).logits, forward(seq, back).logits)


def _dataset(n, seed, cfg=CFG):
    return [(tokenize(t.text, cfg), t.label) for t in make_tasks(n, seed)]


class TestTraining:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(12, 5))
        labels = rng.integers(0, 2, 12)
        w, b = rng.normal(size=(2, 5)), rng.normal(size=2)
        _, gw, gb = head_loss_and_grad(w, b, feats, labels)
        h = 1e-4
        for idx in np.ndindex(w.shape):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (head_loss_and_grad(wp, b, feats, labels)[0]
                  - head_loss_and_grad(wm, b, feats, labels)[0]) / (2 * h)
            assert abs(fd - gw[idx]) / max(abs(fd), abs(gw[idx]), 1e-12) < 1e-4

    def test_lr_zero_unchanged(self, weights):
        out = train_heads(weights, _dataset(10, 1), learning_rate=0.0, epochs=5)
        assert np.array_equal(out.head_w, weights.head_w)
        assert np.array_equal(out.final_b, weights.final_b)

    def test_empty_dataset(self, weights):
        with pytest.raises(InvalidInputError):
            train_heads(weights, [])

    def test_loss_decreases(self, weights):
        data = _dataset(40, 2)
        trained = train_heads(weights, data, epochs=20)
        assert final_head_loss(trained, data) < final_head_loss(weights, data)

    def test_reaches_accuracy(self):
        cfg = EncoderConfig(seed=1)
        data = _dataset(200, 5, cfg)
        w = train_heads(ModelWeights.init(cfg), data, learning_rate=0.1, epochs=50)
        feats, labels = head_features(w, data)
        pred = np.argmax(feats[-1] @ w.final_w.T + w.final_b, axis=1)
        assert (pred == labels).mean() > 0.9
