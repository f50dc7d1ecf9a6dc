import numpy as np
import pytest

from plandyn.corpus import REASON_OVERRUN, validate_sequence
from plandyn.policy import (
    GREEDY,
    DecodeConfig,
    LinearPolicy,
    TabularPolicy,
    load_checkpoint,
    logits_at,
    next_distribution,
    rollout,
    save_checkpoint,
    softmax,
)

from test_graphs import CHAIN, DIAMOND


def chain_model():
    """Deterministic model following 0 -> 1 -> 2 with EOS at the target."""
    m = TabularPolicy.zeros(3)
    m.logits[2, 0, 1] = 50.0
    m.logits[2, 1, 2] = 50.0
    m.logits[2, 2, 3] = 50.0
    return m


class TestLogits:
    def test_linear_zero(self):
        m = LinearPolicy.zeros(5)
        assert not logits_at(m, 3, 0).any()

    def test_linear_additive(self):
        m = LinearPolicy.zeros(5)
        m.w_m[0, 1] = 0.3
        m.w_v[3, 1] = 0.5
        assert logits_at(m, 3, 0)[1] == pytest.approx(0.8)

    def test_softmax_normalized(self):
        rng = np.random.default_rng(0)
        m = TabularPolicy(rng.normal(size=(6, 6, 7)))
        for i in range(6):
            for j in range(6):
                assert abs(softmax(logits_at(m, i, j)).sum() - 1.0) < 1e-12

    def test_out_of_range(self):
        m = TabularPolicy.zeros(4)
        with pytest.raises(ValueError):
            logits_at(m, 4, 0)


class TestNextDistribution:
    def test_uniform(self):
        m = TabularPolicy.zeros(2)
        probs = next_distribution(m, 1, 0, DecodeConfig(tau=1.0))
        assert np.allclose(probs, [1 / 3] * 3)

    def test_softmax_values(self):
        m = TabularPolicy.zeros(1)
        m.logits[0, 0] = [np.log(3.0), 0.0]
        probs = next_distribution(m, 0, 0, DecodeConfig(tau=1.0))
        assert np.allclose(probs, [0.75, 0.25], atol=1e-12)

    def test_greedy_tie_breaks_low(self):
        m = TabularPolicy.zeros(6)
        m.logits[0, 0, 2] = 7.0
        m.logits[0, 0, 5] = 7.0
        probs = next_distribution(m, 0, 0, GREEDY)
        assert probs[2] == 1.0 and probs[5] == 0.0

    def test_temperature_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(mode="temperature", tau=0.0)
        with pytest.raises(ValueError):
            DecodeConfig(mode="nonsense")


class TestRollout:
    def test_deterministic_chain(self):
        seq = rollout(chain_model(), 0, 2, GREEDY)
        assert seq.tokens == (0, 2, 0, 1, 2, 3)
        assert validate_sequence(CHAIN, seq).valid

    def test_greedy_is_rng_independent(self):
        a = rollout(chain_model(), 0, 2, GREEDY, rng=np.random.default_rng(0))
        b = rollout(chain_model(), 0, 2, GREEDY, rng=np.random.default_rng(99))
        assert a == b

    def test_max_len_one_overrun(self):
        m = TabularPolicy.zeros(3)
        m.logits[2, 0, 1] = 50.0
        seq = rollout(m, 0, 2, GREEDY, max_len=1)
        assert seq.tokens == (0, 2, 0, 1)
        assert validate_sequence(CHAIN, seq).reason == REASON_OVERRUN

    def test_uniform_policy_matches_absorption_probabilities(self):
        m = TabularPolicy.zeros(4)
        rng = np.random.default_rng(7)
        decode = DecodeConfig(tau=1.0)
        hits = {"upper": 0, "lower": 0}
        trials = 10_000
        for _ in range(trials):
            seq = rollout(m, 0, 3, decode, max_len=16, rng=rng)
            if validate_sequence(DIAMOND, seq).valid:
                hits["upper" if seq.tokens[3] == 1 else "lower"] += 1
        # each valid completion has exact probability (1/5)^3
        expected = trials * (1 / 5) ** 3
        sigma = np.sqrt(trials * (1 / 5) ** 3)
        assert abs(hits["upper"] - expected) < 4 * sigma
        assert abs(hits["lower"] - expected) < 4 * sigma

    def test_stop_at_target_appends_eos(self):
        m = TabularPolicy.zeros(3)
        m.logits[2, 0, 1] = 50.0
        m.logits[2, 1, 2] = 50.0
        seq = rollout(m, 0, 2, GREEDY, stop_at_target=True)
        assert seq.tokens == (0, 2, 0, 1, 2, 3)

    def test_sampling_needs_rng(self):
        with pytest.raises(ValueError):
            rollout(chain_model(), 0, 2, DecodeConfig(tau=1.0))


class TestLinearTabularEquivalence:
    def test_identical_rollouts(self):
        rng = np.random.default_rng(3)
        lin = LinearPolicy(rng.normal(size=(5, 6)), rng.normal(size=(5, 6)))
        tab = TabularPolicy.from_linear(lin)
        decode = DecodeConfig(tau=0.7)
        for seed in range(20):
            a = rollout(lin, 0, 4, decode, rng=np.random.default_rng(seed))
            b = rollout(tab, 0, 4, decode, rng=np.random.default_rng(seed))
            assert a == b


class TestCheckpoints:
    def test_tabular_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        m = TabularPolicy(rng.normal(size=(4, 4, 5)) * 1e3)
        m.logits[0, 0, 0] = -1e9
        path = tmp_path / "model.json"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert isinstance(loaded, TabularPolicy)
        assert (loaded.logits == m.logits).all()

    def test_linear_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        m = LinearPolicy(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
        path = tmp_path / "model.json"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert isinstance(loaded, LinearPolicy)
        assert (loaded.w_m == m.w_m).all() and (loaded.w_v == m.w_v).all()
