"""Diverse translation by interpolating the input with sampled partners.

For each of K partners, every encoder position and every decoder step gets
its own folded Beta draw lambda = max(beta, 1-beta) in [0.5, 1], so the true
input always dominates the mixture. The Beta concentration is
alpha_i = tau + tau / d(x, x^i): nearby partners (small d) push alpha up and
lambda toward 0.5 (strong mixing is safe), distant partners get alpha near
tau and lambda near 1 (mostly the true input).

Plain and mixup decoding share one beam-search implementation that differs
only in how the previous-token embedding is produced, which is what makes
the lambda=1 endpoint reduce to plain beam search token-for-token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .corpus import (BOS_ID, EOS_ID, PAD_ID, LengthBuckets, ParallelCorpus,
                     sample_partners)
from .errors import ContractViolation
from .model import EncoderOutput, Transformer
from .rng import RngHub
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class DecodeConfig:
    K: int = 5
    tau: float = 0.3
    beam_size: int = 4
    length_penalty: float = 0.6
    max_out_len: int = 64
    length_selection: bool = True    # off = partners of any length (ablation)
    similarity_weighting: bool = True  # off = fixed alpha for all partners
    fixed_alpha: float | None = None   # used when similarity_weighting is off
    seed: int = 0
    force_lambda: float | None = None  # endpoint/testing knob

    def __post_init__(self):
        if self.K < 1:
            raise ContractViolation(f"K must be >= 1, got {self.K}")
        if not self.tau > 0:
            raise ContractViolation(f"tau must be > 0, got {self.tau}")
        if self.beam_size < 1:
            raise ContractViolation(f"beam size must be >= 1, got {self.beam_size}")
        if not self.similarity_weighting and self.fixed_alpha is None:
            object.__setattr__(self, "fixed_alpha", self.tau)

    def to_dict(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class Partner:
    pair_id: int
    src: np.ndarray
    tgt: np.ndarray
    alpha: float
    distance: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation(f"partner alpha must be > 0, got {self.alpha}")
        if self.distance < 0:
            raise ContractViolation("partner distance must be >= 0")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]   # generated ids, ending in <eos> unless truncated
    logprob: float
    score: float              # logprob / len(tokens) ** lp_exponent
    truncated: bool = False

    @classmethod
    def make(cls, tokens, logprob: float, lp_exponent: float,
             truncated: bool = False) -> "Hypothesis":
        tokens = tuple(int(t) for t in tokens)
        return cls(tokens, float(logprob),
                   float(logprob) / (len(tokens) ** lp_exponent), truncated)


@dataclass
class DiverseOutput:
    input_tokens: tuple[int, ...]
    hypotheses: list[Hypothesis]
    partners: list[Partner]
    shortfall: bool = False
    enc_lambdas: list[np.ndarray] = field(default_factory=list)
    dec_lambdas: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.hypotheses) != len(self.partners):
            raise ContractViolation("one hypothesis per partner required")


# ---------------------------------------------------------------------------
# interpolation pieces


def sentence_embedding(tokens, table: np.ndarray) -> np.ndarray:
    """Mean of the raw (unscaled) embedding rows of ``tokens``."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ContractViolation("sentence_embedding of an empty sequence")
    return np.asarray(table)[ids].mean(axis=0)


def partner_alpha(x, x_partner, tau: float,
                  table: np.ndarray) -> tuple[float, float]:
    """alpha_i = tau + tau / d with d the Euclidean distance between mean
    token embeddings, clamped below by 1e-6."""
    if not tau > 0:
        raise ContractViolation(f"tau must be > 0, got {tau}")
    diff = sentence_embedding(x, table) - sentence_embedding(x_partner, table)
    d = max(float(np.linalg.norm(diff)), 1e-6)
    return tau + tau / d, d


def sample_step_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Folded Beta draw: max(beta, 1-beta) in [0.5, 1]."""
    if not alpha > 0:
        raise ContractViolation(f"alpha must be > 0, got {alpha}")
    beta = float(rng.beta(alpha, alpha))
    return max(beta, 1.0 - beta)


def mix_source(x, x_partner, lambdas, model: Transformer) -> Tensor:
    """Tokenwise mix of scaled source embeddings over the input's length.

    The partner is padded with <pad> (or truncated) to the input's length:
    the input always governs."""
    x = np.asarray(x, dtype=np.int64)
    I = x.size
    lam = np.asarray(lambdas, dtype=np.float32)
    if lam.shape != (I,):
        raise ContractViolation(
            f"need one lambda per input position: {lam.shape} vs {I}")
    if np.any(lam < 0.5) or np.any(lam > 1.0):
        raise ContractViolation("decode-time lambda must lie in [0.5, 1]")
    partner = np.full(I, PAD_ID, dtype=np.int64)
    take = min(I, np.asarray(x_partner).size)
    partner[:take] = np.asarray(x_partner, dtype=np.int64)[:take]
    e_x = model.embed_source(x).data
    e_p = model.embed_source(partner).data
    lam_col = lam[:, None]
    return Tensor(lam_col * e_x + (1.0 - lam_col) * e_p)


# ---------------------------------------------------------------------------
# beam search (single implementation; embeddings are pluggable)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _run_beam(model: Transformer, enc: EncoderOutput, prev_embed,
              beam_size: int, lp_exponent: float, max_out_len: int,
              top_n: int) -> list[Hypothesis]:
    """Beam search over a single sentence's encoder output.

    ``prev_embed(prev_tokens, t)`` supplies the (scaled, possibly mixed)
    embeddings of the previous tokens for step t >= 1. Ties break
    deterministically: higher logprob first, then lower beam index, then
    lower token id.
    """
    k = beam_size
    h = enc.h.data
    enc_tiled = EncoderOutput(h=Tensor(np.repeat(h, k, axis=0)),
                              src_keep=np.repeat(enc.src_keep, k, axis=0))
    decoder = model.start_decoder(enc_tiled)

    prev = np.full(k, BOS_ID, dtype=np.int64)
    logprob = np.full(k, -np.inf)
    logprob[0] = 0.0  # only beam 0 is live until beams diverge
    prefixes: list[tuple[int, ...]] = [() for _ in range(k)]
    done: list[Hypothesis] = []

    for t in range(1, max_out_len + 1):
        logits = decoder.step(prev_embed(prev, t))
        with np.errstate(invalid="ignore"):
            cand = logprob[:, None] + _log_softmax_np(logits)
        cand[np.isnan(cand)] = -np.inf
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")

        V = logits.shape[1]
        new_prev = np.full(k, EOS_ID, dtype=np.int64)
        new_logprob = np.full(k, -np.inf)
        parents = np.zeros(k, dtype=np.int64)
        new_prefixes: list[tuple[int, ...]] = [() for _ in range(k)]
        # Scan candidates best-first until the k continuation slots fill;
        # an <eos> candidate finishes a hypothesis only if it ranks inside
        # that window, so a model that never favors <eos> can genuinely fail
        # to finish (and then takes the truncation fallback below).
        slot = 0
        for idx in order:
            if slot == k:
                break
            total = flat[idx]
            if total == -np.inf:
                break
            beam, token = divmod(int(idx), V)
            if token == EOS_ID:
                done.append(Hypothesis.make(prefixes[beam] + (EOS_ID,), total,
                                            lp_exponent))
                continue
            parents[slot] = beam
            new_prev[slot] = token
            new_logprob[slot] = total
            new_prefixes[slot] = prefixes[beam] + (token,)
            slot += 1

        if slot == 0:
            break
        decoder.reorder(parents)
        prev, logprob, prefixes = new_prev, new_logprob, new_prefixes

        if done and slot > 0:
            # An alive beam's best reachable score only shrinks in logprob
            # and is maximized by the longest length, so this bound is sound.
            best_alive_bound = new_logprob.max() / (max_out_len ** lp_exponent)
            kept = sorted(done, key=lambda hyp: -hyp.score)[:top_n]
            if len(kept) >= top_n and best_alive_bound < kept[-1].score:
                break

    if not done:
        # Nothing finished within the length budget: surface the best
        # unfinished prefix, flagged.
        alive = [(logprob[b], b) for b in range(k) if logprob[b] > -np.inf]
        if not alive:
            raise ContractViolation("beam search produced no candidates")
        best = max(alive, key=lambda pair: pair[0] / (len(prefixes[pair[1]])
                                                      ** lp_exponent))
        return [Hypothesis.make(prefixes[best[1]], best[0], lp_exponent,
                                truncated=True)]

    ranked = sorted(range(len(done)), key=lambda i: (-done[i].score, i))
    return [done[i] for i in ranked[:top_n]]


def beam_search(model: Transformer, x, beam_size: int = 4,
                lp_exponent: float = 0.6, top_n: int = 1,
                max_out_len: int | None = None) -> list[Hypothesis]:
    """Standard beam search over raw (unmixed) embeddings."""
    x = np.asarray(x, dtype=np.int64)
    if max_out_len is None:
        max_out_len = model.config.max_len

    def plain_prev_embed(prev_tokens, t):
        return model.embed_target(prev_tokens).data

    with no_grad():
        enc = model.encode(model.embed_source(x[None, :]),
                           np.ones((1, x.size), dtype=bool))
        return _run_beam(model, enc, plain_prev_embed, beam_size, lp_exponent,
                         max_out_len, top_n)


def mixup_beam_search(model: Transformer, enc_mixed: EncoderOutput,
                      partner_tgt, config: DecodeConfig,
                      rng: np.random.Generator, alpha: float,
                      lambda_trace: list[float] | None = None) -> Hypothesis:
    """Beam search where each step's previous-token embedding is mixed with
    the partner's token at that position (one lambda per step, shared across
    beams); past the partner's end the partner operand is <eos>."""
    partner_frames = [BOS_ID] + [int(t) for t in np.asarray(partner_tgt)] + [EOS_ID]

    def mixed_prev_embed(prev_tokens, t):
        if config.force_lambda is not None:
            lam = float(config.force_lambda)
        else:
            lam = sample_step_lambda(alpha, rng)
        if lambda_trace is not None:
            lambda_trace.append(lam)
        partner_id = partner_frames[t - 1] if t - 1 < len(partner_frames) else EOS_ID
        e_prev = model.embed_target(prev_tokens).data
        e_partner = model.embed_target(np.array([partner_id])).data[0]
        lam32 = np.float32(lam)
        return lam32 * e_prev + (np.float32(1.0) - lam32) * e_partner

    with no_grad():
        hyps = _run_beam(model, enc_mixed, mixed_prev_embed, config.beam_size,
                         config.length_penalty, config.max_out_len, top_n=1)
    return hyps[0]


# ---------------------------------------------------------------------------
# top level


def _sample_any_length(buckets: LengthBuckets, K: int,
                       rng: np.random.Generator,
                       exclude_ids) -> tuple[list[int], bool]:
    """Uniform over the whole corpus (the LenSelection-off ablation)."""
    excluded = set(int(e) for e in exclude_ids)
    pool = sorted(pid for ids in buckets.by_length.values() for pid in ids
                  if pid not in excluded)
    if len(pool) < K:
        return pool, True
    idx = rng.choice(len(pool), size=K, replace=False)
    return [pool[i] for i in sorted(idx.tolist())], False


def diverse_translate(model: Transformer, corpus: ParallelCorpus,
                      buckets: LengthBuckets, x, config: DecodeConfig,
                      hub: RngHub | int, input_key: str = "0") -> DiverseOutput:
    """K interpolated decodes of input ``x``; each partner gets its own rng
    stream derived from (master seed, input key, partner rank), so results
    do not depend on scheduling order."""
    if isinstance(hub, int):
        hub = RngHub(hub)
    x = np.asarray(x, dtype=np.int64)
    exclude = corpus.find_source(x)
    partner_rng = hub.stream(f"partners.{input_key}")
    if config.length_selection:
        partner_ids, shortfall = sample_partners(buckets, int(x.size), config.K,
                                                 partner_rng, exclude)
    else:
        partner_ids, shortfall = _sample_any_length(buckets, config.K,
                                                    partner_rng, exclude)

    table = model.params["src_embed"].data
    out = DiverseOutput(input_tokens=tuple(int(t) for t in x), hypotheses=[],
                        partners=[], shortfall=shortfall)
    for rank, pid in enumerate(partner_ids):
        pair = corpus.pairs[pid]
        alpha, dist = partner_alpha(x, pair.src, config.tau, table)
        if not config.similarity_weighting:
            alpha = float(config.fixed_alpha)
        partner = Partner(pair_id=pid, src=pair.src, tgt=pair.tgt,
                          alpha=alpha, distance=dist)
        rng = hub.stream(f"decode.{input_key}.{rank}")

        if config.force_lambda is not None:
            enc_lams = np.full(x.size, float(config.force_lambda), np.float32)
        else:
            enc_lams = np.array([sample_step_lambda(alpha, rng)
                                 for _ in range(x.size)], dtype=np.float32)
        with no_grad():
            mixed = mix_source(x, pair.src, enc_lams, model)
            enc = model.encode(mixed, np.ones((1, x.size), dtype=bool))
        trace: list[float] = []
        hyp = mixup_beam_search(model, enc, pair.tgt, config, rng, alpha,
                                lambda_trace=trace)
        out.partners.append(partner)
        out.hypotheses.append(hyp)
        out.enc_lambdas.append(enc_lams)
        out.dec_lambdas.append(np.array(trace, dtype=np.float32))
    return out
