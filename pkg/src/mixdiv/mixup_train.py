"""Mixup training: convex combinations of two sampled sentence pairs.

Each step draws two independent batches of pairs and one lambda per example,
mixes token embeddings on both sides, mixes the one-hot label sequences, and
applies label smoothing to the mixture. Length mismatches are handled by
padding both constituents of an example to the longer one; the per-position
loss weight is lambda * [position real in pair i] + (1-lambda) * [real in
pair j], and the mixed label row is renormalized by that weight. This keeps
every supervised row a proper distribution and makes the lambda=1 endpoint
reduce exactly to plain training on stream i (positions only pair j covers
get weight 0 there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, ParallelCorpus, SentencePair
from .errors import ContractViolation, NumericalError, ShapeMismatchError
from .model import Transformer
from .rng import RngHub
from .tensor import AdamState, Tensor, adam_step, backward
from . import tensor as T


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation(f"mixup alpha must be > 0, got {self.alpha}")


def sample_pair_lambda(alpha: float, rng: np.random.Generator) -> float:
    """One lambda per example, shared by every position on both sides."""
    if not alpha > 0:
        raise ContractViolation(f"alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


@dataclass
class MixedBatch:
    """Everything forward_train needs for one step."""

    src_embeddings: Tensor        # [B, L_src, d_model]
    src_keep: np.ndarray          # [B, L_src] bool
    tgt_input_embeddings: Tensor  # [B, L_tgt, d_model]
    soft_labels: np.ndarray       # [B, L_tgt, V_tgt]
    label_weights: np.ndarray     # [B, L_tgt] float32, 0 masks a position out
    lambdas: np.ndarray           # [B]

    def __post_init__(self):
        if np.any(self.lambdas < 0) or np.any(self.lambdas > 1):
            raise ContractViolation("lambda outside [0, 1]")
        active = self.label_weights > 0
        if active.any():
            sums = self.soft_labels.sum(axis=-1)[active]
            worst = float(np.abs(sums - 1.0).max())
            if worst > 1e-6:
                raise ContractViolation(
                    f"active soft-label row sums off by {worst:.3e}")

    @property
    def token_count(self) -> int:
        """Supervised target positions in this batch."""
        return int(np.count_nonzero(self.label_weights > 0))


def _teacher_forcing_ids(pairs: list[SentencePair], width: int):
    """Decoder input ids and label ids at fixed width.

    Labels are the target tokens followed by <eos>; -1 marks positions past
    the sequence (no label, never onehot(<pad>)).
    """
    B = len(pairs)
    inputs = np.full((B, width), PAD_ID, dtype=np.int64)
    labels = np.full((B, width), -1, dtype=np.int64)
    for b, pair in enumerate(pairs):
        n = pair.tgt.size + 1  # room for <eos>
        inputs[b, 0] = BOS_ID
        inputs[b, 1:n] = pair.tgt
        labels[b, :n - 1] = pair.tgt
        labels[b, n - 1] = EOS_ID
    return inputs, labels


def _source_ids(pairs: list[SentencePair], width: int) -> np.ndarray:
    out = np.full((len(pairs), width), PAD_ID, dtype=np.int64)
    for b, pair in enumerate(pairs):
        out[b, :pair.src.size] = pair.src
    return out


def _onehot(labels: np.ndarray, vocab: int) -> np.ndarray:
    """[B, L, V] one-hot rows; all-zero rows where the label is -1."""
    out = np.zeros(labels.shape + (vocab,), dtype=np.float32)
    real = labels >= 0
    b, t = np.nonzero(real)
    out[b, t, labels[real]] = 1.0
    return out


def _smooth(labels: np.ndarray, active: np.ndarray, epsilon: float) -> np.ndarray:
    """(1-eps) * labels + eps/V on active rows only."""
    if epsilon == 0.0:
        return labels
    V = labels.shape[-1]
    smoothed = labels * np.float32(1.0 - epsilon)
    smoothed[active] += np.float32(epsilon / V)
    return smoothed


def build_plain_batch(pairs: list[SentencePair], model: Transformer,
                      epsilon: float) -> MixedBatch:
    """Standard teacher-forcing batch (the mixup-disabled path)."""
    src_width = max(p.src.size for p in pairs)
    tgt_width = max(p.tgt.size for p in pairs) + 1
    src = _source_ids(pairs, src_width)
    tgt_in, labels = _teacher_forcing_ids(pairs, tgt_width)
    real = labels >= 0
    onehot = _onehot(labels, model.config.tgt_vocab_size)
    return MixedBatch(
        src_embeddings=model.embed_source(src),
        src_keep=src != PAD_ID,
        tgt_input_embeddings=model.embed_target(tgt_in),
        soft_labels=_smooth(onehot, real, epsilon),
        label_weights=real.astype(np.float32),
        lambdas=np.ones(len(pairs)),
    )


def build_mixed_batch(pairs_i: list[SentencePair], pairs_j: list[SentencePair],
                      lambdas, model: Transformer, epsilon: float) -> MixedBatch:
    """Tokenwise convex combination of two aligned batches."""
    if len(pairs_i) != len(pairs_j):
        raise ShapeMismatchError(
            f"batch sizes differ: {len(pairs_i)} vs {len(pairs_j)}")
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.shape != (len(pairs_i),):
        raise ShapeMismatchError(
            f"need one lambda per example, got shape {lam.shape}")
    if np.any(lam < 0) or np.any(lam > 1):
        raise ContractViolation("lambda outside [0, 1]")

    B = len(pairs_i)
    src_width = max(max(a.src.size, b.src.size) for a, b in zip(pairs_i, pairs_j))
    tgt_width = max(max(a.tgt.size, b.tgt.size) for a, b in zip(pairs_i, pairs_j)) + 1
    src_i = _source_ids(pairs_i, src_width)
    src_j = _source_ids(pairs_j, src_width)
    in_i, lab_i = _teacher_forcing_ids(pairs_i, tgt_width)
    in_j, lab_j = _teacher_forcing_ids(pairs_j, tgt_width)

    lam32 = lam.astype(np.float32)
    lam_e = Tensor(lam32.reshape(B, 1, 1))
    inv_e = Tensor((1.0 - lam32).reshape(B, 1, 1))
    src_emb = T.add(T.mul(model.embed_source(src_i), lam_e),
                    T.mul(model.embed_source(src_j), inv_e))
    tgt_emb = T.add(T.mul(model.embed_target(in_i), lam_e),
                    T.mul(model.embed_target(in_j), inv_e))

    V = model.config.tgt_vocab_size
    real_i = (lab_i >= 0).astype(np.float32)
    real_j = (lab_j >= 0).astype(np.float32)
    w = lam32[:, None] * real_i + (1.0 - lam32)[:, None] * real_j
    mixed = (lam32[:, None, None] * _onehot(lab_i, V)
             + (1.0 - lam32)[:, None, None] * _onehot(lab_j, V))
    active = w > 0
    mixed[active] /= w[active][:, None]

    # Attendable where the lambda-weighted mixture carries any real token:
    # the union for interior lambda, exactly the plain mask at the endpoints.
    src_w = (lam32[:, None] * (src_i != PAD_ID)
             + (1.0 - lam32)[:, None] * (src_j != PAD_ID))
    src_keep = src_w > 0

    return MixedBatch(
        src_embeddings=src_emb,
        src_keep=src_keep,
        tgt_input_embeddings=tgt_emb,
        soft_labels=_smooth(mixed, active, epsilon),
        label_weights=w,
        lambdas=lam,
    )


@dataclass
class TrainStats:
    steps: int
    mean_loss: float
    final_loss: float
    total_tokens: int


def train_steps(model: Transformer, corpus: ParallelCorpus, mixup: MixupConfig,
                adam: AdamState, hub: RngHub, num_steps: int,
                batch_size: int = 32, force_lambda: float | None = None,
                log_every: int = 100, log_stream=None) -> TrainStats:
    """Run ``num_steps`` optimizer steps.

    Every stream is named by the absolute step index (``adam.step``), so a
    run resumed from a checkpoint consumes exactly the randomness the
    uninterrupted run would have.
    """
    if num_steps < 0 or batch_size < 1:
        raise ContractViolation("num_steps must be >= 0 and batch_size >= 1")
    if len(corpus) == 0:
        raise ContractViolation("cannot train on an empty corpus")
    cfg = model.config
    losses: list[float] = []
    total_tokens = 0
    for _ in range(num_steps):
        t = adam.step  # absolute index of the step about to run
        idx_i = hub.stream(f"batch_i.{t}").integers(0, len(corpus), size=batch_size)
        pairs_i = [corpus.pairs[int(k)] for k in idx_i]
        if mixup.enabled:
            idx_j = hub.stream(f"batch_j.{t}").integers(0, len(corpus),
                                                        size=batch_size)
            pairs_j = [corpus.pairs[int(k)] for k in idx_j]
            if force_lambda is None:
                lrng = hub.stream(f"lambda.{t}")
                lam = np.array([sample_pair_lambda(mixup.alpha, lrng)
                                for _ in range(batch_size)])
            else:
                lam = np.full(batch_size, float(force_lambda))
            batch = build_mixed_batch(pairs_i, pairs_j, lam, model,
                                      cfg.label_smoothing)
        else:
            batch = build_plain_batch(pairs_i, model, cfg.label_smoothing)

        drop_rng = hub.stream(f"dropout.{t}") if cfg.dropout > 0 else None
        model.params.zero_grad()
        loss = model.forward_train(batch.src_embeddings, batch.src_keep,
                                   batch.tgt_input_embeddings,
                                   batch.soft_labels, batch.label_weights,
                                   rng=drop_rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {t}")
        backward(loss)
        lr = adam_step(model.params.as_dict(), adam)
        losses.append(value)
        total_tokens += batch.token_count
        if log_stream is not None and (adam.step % log_every == 0
                                       or adam.step == 1):
            print(f"{adam.step} {value:.6f} {lr:.8f} {batch.token_count}",
                  file=log_stream, flush=True)

    if not model.params.all_finite():
        raise NumericalError(f"non-finite parameter after step {adam.step}")
    if not losses:
        return TrainStats(0, float("nan"), float("nan"), 0)
    return TrainStats(len(losses), float(np.mean(losses)), losses[-1],
                      total_tokens)


def train_epoch(corpus: ParallelCorpus, model: Transformer, mixup: MixupConfig,
                adam: AdamState, hub: RngHub, batch_size: int = 32,
                **kwargs) -> TrainStats:
    """One pass worth of steps over the corpus (by expected coverage)."""
    steps = max(1, math.ceil(len(corpus) / batch_size))
    return train_steps(model, corpus, mixup, adam, hub, steps,
                       batch_size=batch_size, **kwargs)
