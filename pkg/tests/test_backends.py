import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collabinfer.backends import (
    BackendOutput,
    CostModel,
    SyntheticBackend,
    SyntheticDynamics,
    TierProfile,
    ToyBackend,
    TraceBackend,
    TraceRecord,
    TraceStore,
    backend_infer,
    make_backend,
)
from collabinfer.decision import EarlyExitParams, layer_diff
from collabinfer.encoder import EncoderConfig, ModelWeights
from collabinfer.errors import ConfigError, MissingTraceError, TraceMismatchError
from collabinfer.streams import derive_rng, stream_seed

TOY_CFG = EncoderConfig(n_layers=6, n_heads=2, d_model=16, d_ff=32, seed=4)


def toy_profile(**kw):
    return TierProfile(index=1, backend="toy", encoder=TOY_CFG,
                       cost=CostModel(base=0.0, per_token=0.0, per_layer=5.0), **kw)


class TestCostModel:
    def test_affine(self):
        c = CostModel(base=10, per_token=2, per_layer=3)
        assert c(5, 4) == 10 + 10 + 12
        assert CostModel(per_token_sq=1.0, per_layer=0)(4, 9) == 16

    def test_negative(self):
        with pytest.raises(ConfigError):
            CostModel(base=-1)


class TestToy:
    def test_tau_zero_costs_full_depth(self):
        prof = toy_profile()
        b = ToyBackend(prof, ModelWeights.init(TOY_CFG))
        out = b.infer("x", 0, prof.tokenize("a good film"), EarlyExitParams(0.0, 1))
        assert out.executed_layers == 6 and out.cost == prof.cost(5, 6) == 30.0

    def test_exit_halves_layer_cost(self):
        # untrained heads emit uniform outputs, so the controller fires at layer 3
        prof = toy_profile()
        b = ToyBackend(prof, ModelWeights.init(TOY_CFG))
        full = b.infer("x", 0, prof.tokenize("a good film"), None)
        early = b.infer("x", 0, prof.tokenize("a good film"), EarlyExitParams(0.01, 2))
        assert early.executed_layers == 3 and early.exited_early
        assert early.cost == full.cost / 2

    def test_importance_mass(self):
        prof = toy_profile()
        b = ToyBackend(prof, ModelWeights.init(TOY_CFG))
        tokens = prof.tokenize("the acting was superb")
        out = b.infer("x", 0, tokens, None)
        assert out.importance.values.sum() == pytest.approx(6 * 2 * len(tokens), abs=1e-9)

    def test_build_trains_and_is_deterministic(self):
        prof = toy_profile(train_samples=30, train_epochs=5)
        a, b = ToyBackend.build(prof, 3), ToyBackend.build(prof, 3)
        assert np.array_equal(a.weights.final_w, b.weights.final_w)
        assert np.any(a.weights.final_w != 0)


class TestSynthetic:
    def test_perfect_accuracy(self):
        b = SyntheticBackend(TierProfile(index=1, accuracy=1.0, n_layers=4), seed=0)
        for i in range(200):
            rec = b.record(f"t{i}", i % 2, 8)
            assert int(np.argmax(rec.final_probs)) == i % 2

    def test_empirical_accuracy(self):
        b = SyntheticBackend(TierProfile(index=1, accuracy=0.9, n_layers=2), seed=123)
        hits = sum(int(np.argmax(b.record(f"t{i}", i % 2, 4).final_probs)) == i % 2
                   for i in range(10_000))
        assert abs(hits / 10_000 - 0.9) <= 0.01

    def test_confidence_range(self):
        b = SyntheticBackend(TierProfile(index=1, n_layers=3, n_classes=3), seed=1)
        for i in range(300):
            top = b.record(f"t{i}", 2, 5).final_probs.max()
            assert 0.5 <= top < 1.0

    @pytest.mark.parametrize("depth,acc", [(6, 0.8), (12, 0.9), (24, 0.96)])
    def test_layers_converge(self, depth, acc):
        b = SyntheticBackend(TierProfile(index=1, accuracy=acc, n_layers=depth), seed=7)
        first, last = [], []
        for i in range(1000):
            lp = b.record(f"t{i}", i % 2, 10).layer_probs
            first.append(layer_diff(lp[1], lp[0]))
            last.append(layer_diff(lp[-1], lp[-2]))
        first, last = np.array(first), np.array(last)
        assert last.mean() < first.mean()
        assert np.mean(last < first) > 0.8

    def test_layers_start_uniform_end_final(self):
        b = SyntheticBackend(TierProfile(index=1, n_layers=5), seed=2)
        rec = b.record("t0", 1, 6)
        np.testing.assert_array_equal(rec.layer_probs[0], [0.5, 0.5])
        assert np.array_equal(rec.layer_probs[-1], rec.final_probs)
        for v in rec.layer_probs:
            assert abs(v.sum() - 1) <= 1e-12 and np.all(v >= 0)

    def test_importance_total_per_layer(self):
        b = SyntheticBackend(TierProfile(index=1, n_layers=4), seed=2)
        rec = b.record("t0", 1, 9)
        for v in rec.layer_importance:
            assert v.sum() == pytest.approx(9.0, abs=1e-12)

    def test_independent_of_call_order(self):
        prof = TierProfile(index=2, n_layers=6)
        a, b = SyntheticBackend(prof, 5), SyntheticBackend(prof, 5)
        forward_order = {f"t{i}": a.record(f"t{i}", 0, 7) for i in range(20)}
        for i in reversed(range(20)):
            rec = b.record(f"t{i}", 0, 7)
            assert np.array_equal(rec.final_probs, forward_order[f"t{i}"].final_probs)
            assert np.array_equal(rec.layer_importance[0], forward_order[f"t{i}"].layer_importance[0])

    def test_exit_truncates_cost(self):
        prof = TierProfile(index=1, n_layers=12, cost=CostModel(per_layer=1.0))
        b = SyntheticBackend(prof, 0)
        tokens = prof.tokenize("one two three")
        full = b.infer("t0", 0, tokens, EarlyExitParams(0.0, 2))
        assert full.executed_layers == 12 and full.cost == 12
        loose = b.infer("t0", 0, tokens, EarlyExitParams(0.5, 1))
        assert loose.executed_layers < 12 and loose.cost == loose.executed_layers


class TestStreams:
    def test_purposes_differ(self):
        assert stream_seed(1, "t0", "offload/1") != stream_seed(1, "t0", "synthetic/1")
        assert stream_seed(1, "t0", "a") != stream_seed(2, "t0", "a")

    def test_reproducible(self):
        assert derive_rng(3, "x", "y").random() == derive_rng(3, "x", "y").random()


def _record(tid="t0", tier=1):
    return TraceRecord(tid, tier, ("[CLS]", "fine", "[SEP]"), 1,
                       [np.array([0.5, 0.5]), np.array([0.3, 0.7]), np.array([0.2, 0.8])],
                       np.array([3.0, 2.5, 3.5]), np.array([0.1, 0.9]),
                       [np.array([1.0, 1.0, 1.0]), np.array([1.0, 0.5, 1.5]), np.array([1.0, 1.0, 1.0])],
                       "fine")


class TestTraces:
    def test_replay_verbatim(self):
        prof = TierProfile(index=1, backend="trace", n_layers=3, cost=CostModel(per_layer=2.0))
        b = TraceBackend(prof, TraceStore([_record()]))
        out = b.infer("t0", 1, prof.tokenize("fine"), None)
        assert isinstance(out, BackendOutput)
        np.testing.assert_array_equal(out.probs, [0.1, 0.9])
        np.testing.assert_array_equal(out.importance.values, [3.0, 2.5, 3.5])
        assert out.executed_layers == 3 and out.cost == 6.0

    def test_missing(self):
        with pytest.raises(MissingTraceError):
            TraceStore([_record()]).get("nope", 1)

    def test_token_mismatch(self):
        prof = TierProfile(index=1, backend="trace", n_layers=3)
        b = TraceBackend(prof, TraceStore([_record()]))
        with pytest.raises(TraceMismatchError):
            b.infer("t0", 1, prof.tokenize("other"), None)

    def test_file_round_trip(self, tmp_path):
        store = TraceStore([_record("t0"), _record("t1", 2)], header={"seed": 3})
        path = tmp_path / "tr.jsonl"
        store.save(path)
        back = TraceStore.load(path)
        assert back.header["seed"] == 3 and back.task_ids() == ["t0", "t1"]
        a, b = store.get("t1", 2), back.get("t1", 2)
        for x, y in zip(a.layer_probs, b.layer_probs):
            assert np.array_equal(x, y)
        assert np.array_equal(a.importance, b.importance)
        assert b.text == "fine"
        back.save(tmp_path / "again.jsonl")
        assert path.read_bytes() == (tmp_path / "again.jsonl").read_bytes()

    def test_trace_without_store(self):
        with pytest.raises(ConfigError):
            make_backend(TierProfile(index=1, backend="trace"), 0)


class TestDispatch:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            TierProfile(index=1, backend="gpu")

    def test_unknown_backend_object(self):
        prof = TierProfile(index=1)
        with pytest.raises(ConfigError):
            backend_infer(object(), "t", 0, prof.tokenize("x"), None)

    @given(st.integers(1, 40), st.integers(1, 30))
    def test_cost_deterministic(self, n, layers):
        c = CostModel(base=3.0, per_token=0.7, per_layer=2.5)
        assert c(n, layers) == c(n, layers) == 3.0 + 0.7 * n + 2.5 * layers


def test_dynamics_validation():
    with pytest.raises(ConfigError):
        SyntheticDynamics(commit_range=(0.8, 0.2))
    with pytest.raises(ConfigError):
        SyntheticDynamics(confidence_range=(0.0, 1.0))
