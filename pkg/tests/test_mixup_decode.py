import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixdiv.corpus import (EOS_ID, SynthSpec, bucket_by_source_length,
                           generate_synthetic_corpus)
from mixdiv.errors import ContractViolation
from mixdiv.mixup_decode import (DecodeConfig, Hypothesis, beam_search,
                                 diverse_translate, mix_source,
                                 mixup_beam_search, partner_alpha,
                                 sample_step_lambda, sentence_embedding)
from mixdiv.model import ModelConfig, Parameters, Transformer
from mixdiv.rng import RngHub
from mixdiv.tensor import no_grad

from reference_impls import enumerate_sequences


def tiny_model(src_vocab=11, tgt_vocab=9, seed=0, **kw):
    defaults = dict(num_layers=1, num_heads=2, d_model=16, d_ff=32, max_len=16,
                    dropout=0.0, label_smoothing=0.0)
    defaults.update(kw)
    cfg = ModelConfig(src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab,
                      **defaults)
    return Transformer(cfg, Parameters.init(cfg, RngHub(seed)))


class TestSentenceEmbedding:
    def test_single_token_is_its_row(self):
        table = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(sentence_embedding([2], table), table[2])

    def test_repeated_token_idempotent(self):
        table = np.arange(12.0).reshape(4, 3)
        np.testing.assert_allclose(sentence_embedding([2, 2], table), table[2])

    def test_matches_float64_mean(self):
        rng = np.random.default_rng(0)
        table = rng.normal(size=(20, 8)).astype(np.float32)
        ids = rng.integers(0, 20, size=13)
        ours = sentence_embedding(ids, table)
        exact = table[ids].astype(np.float64).sum(axis=0) / len(ids)
        np.testing.assert_allclose(ours, exact, atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            sentence_embedding([], np.zeros((4, 3)))


class TestPartnerAlpha:
    def test_unit_distance(self):
        table = np.zeros((2, 4), dtype=np.float32)
        table[1, 0] = 1.0  # rows exactly distance 1 apart
        alpha, d = partner_alpha([0], [1], tau=0.3, table=table)
        assert d == pytest.approx(1.0)
        assert alpha == pytest.approx(0.6)

    def test_far_partner_approaches_tau(self):
        table = np.zeros((2, 4), dtype=np.float32)
        table[1, 0] = 1e6
        alpha, _ = partner_alpha([0], [1], tau=0.3, table=table)
        assert alpha == pytest.approx(0.3, abs=1e-5)

    def test_identical_sentences_clamp(self):
        table = np.ones((3, 4), dtype=np.float32)
        alpha, d = partner_alpha([1, 2], [2, 1], tau=0.3, table=table)
        assert d == pytest.approx(1e-6)
        assert alpha == pytest.approx(0.3 + 0.3 / 1e-6, rel=1e-6)

    def test_tau_must_be_positive(self):
        with pytest.raises(ContractViolation):
            partner_alpha([0], [1], tau=0.0, table=np.zeros((2, 2)))


class TestSampleStepLambda:
    @given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_always_in_upper_half(self, alpha, seed):
        lam = sample_step_lambda(alpha, np.random.default_rng(seed))
        assert 0.5 <= lam <= 1.0

    def test_mean_at_alpha_one(self):
        rng = np.random.default_rng(1)
        draws = [sample_step_lambda(1.0, rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.75) < 0.005

    def test_huge_alpha_concentrates_at_half(self):
        rng = np.random.default_rng(2)
        draws = [sample_step_lambda(1e4, rng) for _ in range(20_000)]
        assert 0.5 <= np.mean(draws) < 0.51

    def test_tiny_alpha_concentrates_at_one(self):
        rng = np.random.default_rng(3)
        draws = [sample_step_lambda(1e-3, rng) for _ in range(20_000)]
        assert np.mean(draws) > 0.99

    def test_mean_monotone_decreasing_in_alpha(self):
        means = []
        for alpha in (0.1, 0.6, 5.0):
            rng = np.random.default_rng(4)
            means.append(np.mean([sample_step_lambda(alpha, rng)
                                  for _ in range(100_000)]))
        assert means[0] >= means[1] - 0.005
        assert means[1] >= means[2] - 0.005
        assert means[0] > means[2]


class TestMixSource:
    def test_lambda_one_is_input_exactly(self):
        model = tiny_model()
        x = np.array([4, 5, 6])
        mixed = mix_source(x, np.array([7, 8]), np.ones(3), model)
        np.testing.assert_array_equal(mixed.data, model.embed_source(x).data)

    def test_half_mix_of_crafted_rows(self):
        model = tiny_model()
        d = model.config.d_model
        scale = math.sqrt(d)
        table = model.params["src_embed"].data
        table[4] = 0.0
        table[5] = 0.0
        table[4, 0] = 2.0 / scale   # scaled row: [2, 0, ...]
        table[5, 1] = 2.0 / scale   # scaled row: [0, 2, ...]
        mixed = mix_source(np.array([4]), np.array([5]), np.array([0.5]), model)
        expected = np.zeros(d, dtype=np.float32)
        expected[0] = 1.0
        expected[1] = 1.0
        np.testing.assert_allclose(mixed.data[0], expected, atol=1e-6)

    def test_partner_truncated_to_input_length(self):
        model = tiny_model()
        x = np.array([4, 5])
        long_partner = np.array([6, 7, 8, 9])
        mixed = mix_source(x, long_partner, np.full(2, 0.7), model)
        assert mixed.shape == (2, model.config.d_model)

    @given(st.lists(st.floats(0.5, 1.0), min_size=3, max_size=3))
    @settings(max_examples=25, deadline=None)
    def test_convexity(self, lams):
        model = tiny_model()
        x = np.array([4, 5, 6])
        p = np.array([7, 8])  # shorter: last position mixes with <pad>
        mixed = mix_source(x, p, np.array(lams, dtype=np.float32), model)
        from mixdiv.corpus import PAD_ID
        padded = np.array([7, 8, PAD_ID])
        e_x = model.embed_source(x).data
        e_p = model.embed_source(padded).data
        lo = np.minimum(e_x, e_p) - 1e-6
        hi = np.maximum(e_x, e_p) + 1e-6
        assert np.all(mixed.data >= lo)
        assert np.all(mixed.data <= hi)

    def test_out_of_range_lambda_rejected(self):
        model = tiny_model()
        with pytest.raises(ContractViolation):
            mix_source(np.array([4]), np.array([5]), np.array([0.3]), model)


class TestBeamSearch:
    def test_beam_one_dominates_greedy(self):
        # A width-1 beam walks the greedy token path and additionally records
        # every <eos> continuation of it, so the greedy rollout must appear
        # among its finished hypotheses and cannot outscore its best one.
        model = tiny_model(seed=5)
        model.params["out.b"].data[EOS_ID] += 2.0  # make greedy terminate
        x = np.array([4, 5, 6, 7])
        hyps = beam_search(model, x, beam_size=1, top_n=10, max_out_len=10)

        # Independent greedy rollout via the full-recompute decode route.
        with no_grad():
            enc = model.encode(model.embed_source(x[None, :]),
                               np.ones((1, 4), bool))
            prefix = [1]  # <bos>
            out = []
            greedy_logprob = 0.0
            for _ in range(10):
                logits = model.decode_step(enc, model.embed_target(
                    np.array(prefix))).data.astype(np.float64)
                shifted = logits - logits.max()
                logp = shifted - np.log(np.exp(shifted).sum())
                tok = int(np.argmax(logits))
                greedy_logprob += logp[tok]
                out.append(tok)
                if tok == EOS_ID:
                    break
                prefix.append(tok)
        assert out[-1] == EOS_ID, "seed must give a terminating greedy path"
        greedy_score = greedy_logprob / len(out) ** 0.6
        assert tuple(out) in [h.tokens for h in hyps]
        assert hyps[0].score >= greedy_score - 1e-4

    def test_matches_exhaustive_enumeration(self):
        # Beam wide enough to hold every unfinished prefix is exhaustive.
        model = tiny_model(src_vocab=9, tgt_vocab=7, seed=6)
        x = np.array([4, 5])
        V = model.config.tgt_vocab_size
        max_len = 3
        # Wide enough that the per-step candidate window never clips an
        # <eos> candidate: more slots than non-eos continuations exist at
        # the busiest step ((V-1)^2 prefixes alive entering step 3).
        beam = (V - 1) ** (max_len - 1) * (V - 1) + 1  # 217

        with no_grad():
            enc = model.encode(model.embed_source(x[None, :]),
                               np.ones((1, 2), bool))

            def step_logprob(prefix):
                ids = np.array([1] + list(prefix))
                logits = model.decode_step(enc, model.embed_target(ids)).data
                logits = logits.astype(np.float64)
                shifted = logits - logits.max()
                return shifted - np.log(np.exp(shifted).sum())

            best_seq, best_score = enumerate_sequences(
                step_logprob, V, EOS_ID, max_len, 0.6)

        hyp = beam_search(model, x, beam_size=beam, top_n=1,
                          max_out_len=max_len)[0]
        assert not hyp.truncated
        assert hyp.tokens == best_seq
        assert hyp.score == pytest.approx(best_score, abs=1e-4)

    def test_score_is_length_penalized_logprob(self):
        model = tiny_model(seed=7)
        for hyp in beam_search(model, np.array([4, 5]), beam_size=3, top_n=3,
                               max_out_len=8):
            assert hyp.score == pytest.approx(
                hyp.logprob / len(hyp.tokens) ** 0.6, rel=1e-9)

    def test_top_n_sorted_descending(self):
        model = tiny_model(seed=8)
        hyps = beam_search(model, np.array([4, 5, 6]), beam_size=4, top_n=4,
                           max_out_len=8)
        scores = [h.score for h in hyps]
        assert scores == sorted(scores, reverse=True)

    def test_truncation_flag_when_eos_unreachable(self):
        model = tiny_model(seed=9)
        # Make <eos> unreachable by pinning its logit far down.
        model.params["out.b"].data[EOS_ID] = -1e9
        hyp = beam_search(model, np.array([4, 5]), beam_size=2, top_n=1,
                          max_out_len=5)[0]
        assert hyp.truncated
        assert len(hyp.tokens) == 5
        assert EOS_ID not in hyp.tokens


def synonym_setup(seed=0, pairs=120, synonyms=3):
    spec = SynthSpec(vocab_size=10, num_pairs=pairs, min_len=3, max_len=6,
                     synonyms=synonyms, seed=seed)
    synth = generate_synthetic_corpus(spec)
    model = tiny_model(src_vocab=len(synth.train.src_vocab),
                       tgt_vocab=len(synth.train.tgt_vocab), seed=seed)
    buckets = bucket_by_source_length(synth.train)
    return synth, model, buckets


class TestMixupBeamSearch:
    def test_forced_lambda_one_equals_plain_beam(self):
        synth, model, buckets = synonym_setup(seed=1)
        config = DecodeConfig(K=1, tau=0.3, beam_size=4, max_out_len=10,
                              force_lambda=1.0, seed=0)
        for pair in synth.heldout.pairs[:5]:
            plain = beam_search(model, pair.src, beam_size=4, top_n=1,
                                max_out_len=10)[0]
            out = diverse_translate(model, synth.train, buckets, pair.src,
                                    config, RngHub(0),
                                    input_key=str(pair.pair_id))
            assert out.hypotheses[0].tokens == plain.tokens

    def test_lambda_trace_lengths(self):
        synth, model, buckets = synonym_setup(seed=2)
        config = DecodeConfig(K=2, tau=0.5, beam_size=2, max_out_len=8, seed=3)
        pair = synth.heldout.pairs[0]
        out = diverse_translate(model, synth.train, buckets, pair.src, config,
                                RngHub(3), input_key="0")
        for enc_lams, dec_lams in zip(out.enc_lambdas, out.dec_lambdas):
            assert enc_lams.shape == (pair.src.size,)
            assert np.all(enc_lams >= 0.5) and np.all(enc_lams <= 1.0)
            assert 1 <= dec_lams.size <= 8
            assert np.all(dec_lams >= 0.5) and np.all(dec_lams <= 1.0)

    def test_partner_exhaustion_mixes_with_eos(self):
        # A one-token partner target: from step 2 on the partner operand is
        # <eos>; decoding must still complete without error.
        synth, model, buckets = synonym_setup(seed=3)
        config = DecodeConfig(K=1, tau=0.3, beam_size=2, max_out_len=6, seed=1)
        pair = synth.train.pairs[0]
        with no_grad():
            enc = model.encode(model.embed_source(pair.src[None, :]),
                               np.ones((1, pair.src.size), bool))
        hyp = mixup_beam_search(model, enc, np.array([5]), config,
                                RngHub(1).stream("d"), alpha=0.6)
        assert len(hyp.tokens) >= 1


class TestDiverseTranslate:
    def test_exactly_k_outputs_in_partner_order(self):
        synth, model, buckets = synonym_setup(seed=4)
        config = DecodeConfig(K=5, tau=0.3, beam_size=2, max_out_len=8, seed=7)
        pair = synth.heldout.pairs[0]
        out = diverse_translate(model, synth.train, buckets, pair.src, config,
                                RngHub(7), input_key="0")
        assert len(out.hypotheses) == 5
        assert len(out.partners) == 5
        assert not out.shortfall

    def test_same_seed_identical_outputs(self):
        synth, model, buckets = synonym_setup(seed=5)
        config = DecodeConfig(K=3, tau=0.4, beam_size=2, max_out_len=8, seed=11)
        pair = synth.heldout.pairs[1]
        a = diverse_translate(model, synth.train, buckets, pair.src, config,
                              RngHub(11), input_key="k")
        b = diverse_translate(model, synth.train, buckets, pair.src, config,
                              RngHub(11), input_key="k")
        assert [h.tokens for h in a.hypotheses] == [h.tokens for h in b.hypotheses]
        assert [p.pair_id for p in a.partners] == [p.pair_id for p in b.partners]

    def test_training_input_excluded_from_partners(self):
        synth, model, buckets = synonym_setup(seed=6)
        config = DecodeConfig(K=4, tau=0.3, beam_size=1, max_out_len=8, seed=2)
        pair = synth.train.pairs[3]
        for trial in range(5):
            out = diverse_translate(model, synth.train, buckets, pair.src,
                                    config, RngHub(trial), input_key="x")
            assert 3 not in [p.pair_id for p in out.partners]

    def test_partner_lengths_follow_window(self):
        synth, model, buckets = synonym_setup(seed=7, pairs=300)
        config = DecodeConfig(K=3, tau=0.3, beam_size=1, max_out_len=8, seed=5)
        pair = synth.heldout.pairs[0]
        I = pair.src.size
        out = diverse_translate(model, synth.train, buckets, pair.src, config,
                                RngHub(5), input_key="0")
        pool_sizes = sum(len(buckets.by_length.get(n, [])) for n in (I - 1, I))
        if pool_sizes >= config.K:
            for p in out.partners:
                assert p.src.size in (I - 1, I)

    def test_fixed_alpha_ablation(self):
        synth, model, buckets = synonym_setup(seed=8)
        config = DecodeConfig(K=3, tau=0.4, beam_size=1, max_out_len=8, seed=2,
                              similarity_weighting=False)
        assert config.fixed_alpha == pytest.approx(0.4)
        pair = synth.heldout.pairs[0]
        out = diverse_translate(model, synth.train, buckets, pair.src, config,
                                RngHub(2), input_key="0")
        for p in out.partners:
            assert p.alpha == pytest.approx(0.4)

    def test_shortfall_flag_when_corpus_too_small(self):
        spec = SynthSpec(vocab_size=6, num_pairs=4, min_len=3, max_len=4,
                         synonyms=1, seed=1)
        synth = generate_synthetic_corpus(spec)
        model = tiny_model(src_vocab=len(synth.train.src_vocab),
                           tgt_vocab=len(synth.train.tgt_vocab))
        buckets = bucket_by_source_length(synth.train)
        config = DecodeConfig(K=50, tau=0.3, beam_size=1, max_out_len=6, seed=0)
        out = diverse_translate(model, synth.train, buckets,
                                synth.train.pairs[0].src, config, RngHub(0))
        assert out.shortfall
        assert len(out.hypotheses) < 50

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            DecodeConfig(K=0)
        with pytest.raises(ContractViolation):
            DecodeConfig(tau=0.0)
        with pytest.raises(ContractViolation):
            DecodeConfig(beam_size=0)


class TestHypothesis:
    def test_score_invariant(self):
        hyp = Hypothesis.make([5, 6, EOS_ID], -2.4, 0.6)
        assert hyp.score == pytest.approx(-2.4 / 3 ** 0.6)
        assert hyp.tokens == (5, 6, EOS_ID)
