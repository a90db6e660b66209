import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixdiv.corpus import SentencePair, SynthSpec, generate_synthetic_corpus
from mixdiv.errors import ContractViolation, NumericalError, ShapeMismatchError
from mixdiv.mixup_train import (MixupConfig, build_mixed_batch,
                                build_plain_batch, sample_pair_lambda,
                                train_steps)
from mixdiv.model import ModelConfig, Parameters, Transformer
from mixdiv.rng import RngHub
from mixdiv.tensor import AdamState


def cipher_corpus(seed=0, synonyms=1, pairs=200, vocab=12):
    spec = SynthSpec(vocab_size=vocab, num_pairs=pairs, min_len=2, max_len=6,
                     synonyms=synonyms, seed=seed)
    return generate_synthetic_corpus(spec)


def model_for(corpus, seed=0, **kw):
    defaults = dict(num_layers=1, num_heads=2, d_model=16, d_ff=32, max_len=16,
                    dropout=0.0, label_smoothing=0.0)
    defaults.update(kw)
    cfg = ModelConfig(src_vocab_size=len(corpus.src_vocab),
                      tgt_vocab_size=len(corpus.tgt_vocab), **defaults)
    return Transformer(cfg, Parameters.init(cfg, RngHub(seed)))


class TestSamplePairLambda:
    def test_alpha_one_is_uniform_mean_half(self):
        rng = np.random.default_rng(0)
        draws = [sample_pair_lambda(1.0, rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.5) < 0.005

    def test_symmetric_mean_half_small_alpha(self):
        rng = np.random.default_rng(1)
        draws = [sample_pair_lambda(0.1, rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.5) < 0.005

    def test_variance_matches_beta_formula(self):
        # Var[Beta(a, a)] = 1 / (4 (2a + 1)); for a = 0.1 that is 0.208333...
        rng = np.random.default_rng(2)
        draws = np.array([sample_pair_lambda(0.1, rng) for _ in range(100_000)])
        assert abs(draws.var() - 1 / (4 * (2 * 0.1 + 1))) < 0.005

    def test_nonpositive_alpha_rejected(self):
        with pytest.raises(ContractViolation):
            sample_pair_lambda(0.0, np.random.default_rng(0))
        with pytest.raises(ContractViolation):
            MixupConfig(alpha=-1.0)


class TestBuildMixedBatch:
    def _pairs(self):
        a = SentencePair(0, [4, 5, 6], [7, 8])
        b = SentencePair(1, [5, 6], [9, 10, 11])
        return a, b

    def test_lambda_one_equals_pair_i_batch(self):
        synth = cipher_corpus()
        model = model_for(synth.train)
        a, b = self._pairs()
        mixed = build_mixed_batch([a], [b], [1.0], model, epsilon=0.1)
        plain = build_plain_batch([a], model, epsilon=0.1)

        Ls, Lt = plain.src_embeddings.shape[1], plain.tgt_input_embeddings.shape[1]
        np.testing.assert_array_equal(
            mixed.src_embeddings.data[:, :Ls], plain.src_embeddings.data)
        np.testing.assert_array_equal(
            mixed.tgt_input_embeddings.data[:, :Lt], plain.tgt_input_embeddings.data)
        np.testing.assert_array_equal(mixed.soft_labels[:, :Lt], plain.soft_labels)
        np.testing.assert_array_equal(mixed.label_weights[:, :Lt],
                                      plain.label_weights)
        # Positions only pair j covers carry zero weight at the endpoint.
        assert np.all(mixed.label_weights[:, Lt:] == 0)

    def test_lambda_zero_equals_pair_j_batch(self):
        synth = cipher_corpus()
        model = model_for(synth.train)
        a, b = self._pairs()
        mixed = build_mixed_batch([a], [b], [0.0], model, epsilon=0.0)
        plain = build_plain_batch([b], model, epsilon=0.0)
        Lt = plain.tgt_input_embeddings.shape[1]
        np.testing.assert_array_equal(
            mixed.tgt_input_embeddings.data[:, :Lt], plain.tgt_input_embeddings.data)
        np.testing.assert_array_equal(mixed.soft_labels[:, :Lt], plain.soft_labels)

    def test_half_lambda_splits_mass_between_labels(self):
        synth = cipher_corpus()
        model = model_for(synth.train)
        a = SentencePair(0, [4, 5], [7, 8])
        b = SentencePair(1, [5, 4], [9, 8])
        mixed = build_mixed_batch([a], [b], [0.5], model, epsilon=0.0)
        # position 0: labels 7 and 9, weight 1 -> 0.5 each
        row = mixed.soft_labels[0, 0]
        assert row[7] == pytest.approx(0.5)
        assert row[9] == pytest.approx(0.5)
        assert row.sum() == pytest.approx(1.0)
        # position 1: both constituents have label 8 -> all mass there
        assert mixed.soft_labels[0, 1][8] == pytest.approx(1.0)

    def test_batch_size_mismatch(self):
        synth = cipher_corpus()
        model = model_for(synth.train)
        a, b = self._pairs()
        with pytest.raises(ShapeMismatchError):
            build_mixed_batch([a, b], [a], [0.5, 0.5], model, 0.0)

    def test_length_mismatch_weights(self):
        synth = cipher_corpus()
        model = model_for(synth.train)
        a, b = self._pairs()  # targets of length 2 and 3 -> widths 3 and 4
        lam = 0.7
        mixed = build_mixed_batch([a], [b], [lam], model, epsilon=0.0)
        np.testing.assert_allclose(
            mixed.label_weights[0], [1.0, 1.0, 1.0, 1 - lam], atol=1e-6)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 0.3))
    @settings(max_examples=30, deadline=None)
    def test_rows_normalized_and_convex(self, lam, epsilon):
        synth = cipher_corpus()
        model = model_for(synth.train)
        a, b = self._pairs()
        mixed = build_mixed_batch([a, b], [b, a], [lam, 1 - lam], model, epsilon)
        active = mixed.label_weights > 0
        sums = mixed.soft_labels.sum(axis=-1)[active]
        np.testing.assert_allclose(sums, 1.0, atol=1e-5)
        assert mixed.soft_labels.min() >= 0.0
        assert mixed.soft_labels.max() <= 1.0 + 1e-6


class TestTrainSteps:
    def test_forced_lambda_one_matches_plain_losses(self):
        synth = cipher_corpus(seed=3)
        plain_model = model_for(synth.train, seed=11)
        mixed_model = model_for(synth.train, seed=11)

        plain = train_steps(plain_model, synth.train, MixupConfig(enabled=False),
                            AdamState(warmup_steps=10), RngHub(5), num_steps=8,
                            batch_size=8)
        mixed = train_steps(mixed_model, synth.train, MixupConfig(alpha=1.0),
                            AdamState(warmup_steps=10), RngHub(5), num_steps=8,
                            batch_size=8, force_lambda=1.0)
        assert mixed.mean_loss == pytest.approx(plain.mean_loss, abs=1e-6)
        assert mixed.final_loss == pytest.approx(plain.final_loss, abs=1e-6)
        for name, t in plain_model.params.items():
            np.testing.assert_allclose(t.data, mixed_model.params[name].data,
                                       atol=1e-6)

    def test_disabled_mixup_never_consumes_lambda_streams(self):
        synth = cipher_corpus(seed=4)
        m1 = model_for(synth.train, seed=1)
        m2 = model_for(synth.train, seed=1)
        s1 = train_steps(m1, synth.train, MixupConfig(enabled=False),
                         AdamState(), RngHub(9), num_steps=5, batch_size=4)
        s2 = train_steps(m2, synth.train, MixupConfig(enabled=False),
                         AdamState(), RngHub(9), num_steps=5, batch_size=4)
        assert s1.final_loss == s2.final_loss
        for name, t in m1.params.items():
            np.testing.assert_array_equal(t.data, m2.params[name].data)

    def test_loss_decreases_with_mixup_enabled(self):
        synth = cipher_corpus(seed=5, pairs=300)
        model = model_for(synth.train, seed=2, d_model=32, d_ff=64)
        stats = train_steps(model, synth.train, MixupConfig(alpha=1.0),
                            AdamState(base_lr=2e-3, warmup_steps=40),
                            RngHub(1), num_steps=150, batch_size=16)
        assert stats.final_loss < 0.75 * stats.mean_loss
        assert model.params.all_finite()

    def test_non_finite_loss_aborts_with_step_index(self):
        synth = cipher_corpus(seed=6)
        model = model_for(synth.train, seed=3)
        model.params["out.b"].data[:] = np.inf
        with pytest.raises(NumericalError, match="step 0"), \
                np.errstate(invalid="ignore"):
            train_steps(model, synth.train, MixupConfig(enabled=False),
                        AdamState(), RngHub(0), num_steps=1, batch_size=4)

    def test_log_lines_have_four_fields(self):
        synth = cipher_corpus(seed=7)
        model = model_for(synth.train, seed=4)
        sink = io.StringIO()
        train_steps(model, synth.train, MixupConfig(alpha=1.0), AdamState(),
                    RngHub(2), num_steps=3, batch_size=4, log_every=1,
                    log_stream=sink)
        lines = sink.getvalue().strip().splitlines()
        assert len(lines) == 3
        for line in lines:
            step, loss, lr, tokens = line.split()
            assert int(step) >= 1
            assert float(loss) > 0
            assert float(lr) > 0
            assert int(tokens) > 0

    def test_resume_is_bitwise(self, tmp_path):
        from mixdiv.checkpoint import load_model, save_model
        synth = cipher_corpus(seed=8)
        straight = model_for(synth.train, seed=6)
        adam = AdamState(warmup_steps=20)
        train_steps(straight, synth.train, MixupConfig(alpha=1.0), adam,
                    RngHub(3), num_steps=10, batch_size=4)

        resumed = model_for(synth.train, seed=6)
        adam2 = AdamState(warmup_steps=20)
        train_steps(resumed, synth.train, MixupConfig(alpha=1.0), adam2,
                    RngHub(3), num_steps=6, batch_size=4)
        path = tmp_path / "mid.mixdiv"
        save_model(path, resumed.config, resumed.params, adam=adam2)
        _, params3, _, adam3 = load_model(path)
        model3 = Transformer(resumed.config, params3)
        train_steps(model3, synth.train, MixupConfig(alpha=1.0), adam3,
                    RngHub(3), num_steps=4, batch_size=4)

        for name, t in straight.params.items():
            assert t.data.tobytes() == model3.params[name].data.tobytes(), name
