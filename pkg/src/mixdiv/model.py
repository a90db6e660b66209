"""Scaled-down encoder-decoder transformer over pre-mixed embeddings.

The network never sees token ids on its main paths: callers look up (and
possibly interpolate) embeddings first, then hand the mixed sequences to
``encode``/``decode_full``. Positional encodings are added inside those
methods, after mixing, so interpolation always acts on pure token
embeddings. Post-norm residual blocks throughout.

Two decoding routes exist on purpose: ``decode_step`` recomputes the full
prefix through the same graph code as training, while ``IncrementalDecoder``
keeps per-layer key/value caches in plain numpy. They must agree within
1e-5 and are tested against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ShapeMismatchError
from .rng import RngHub
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are desk scale: small enough
    to train on one CPU in minutes."""

    src_vocab_size: int
    tgt_vocab_size: int
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_len: int = 64
    dropout: float = 0.1
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ContractViolation(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractViolation(
                f"label smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("src_vocab_size", "tgt_vocab_size", "num_layers",
                     "num_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                raise ContractViolation(f"missing model config key {f.name!r}")
            parse = float if f.name in ("dropout", "label_smoothing") else int
            kwargs[f.name] = parse(d[f.name])
        return cls(**kwargs)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine positional table, shape [max_len, d_model]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(np.float32)


def _attn_param_names(prefix: str) -> list[str]:
    # No key bias: a bias on the key projection adds the same amount to every
    # score in a query row, which softmax cancels, so the parameter could
    # never influence the model.
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo", "bq", "bv", "bo")]


class Parameters:
    """Named parameter tensors for one model; iteration order is fixed."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = set(self.names(config))
        got = set(tensors)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ContractViolation(
                f"parameter set mismatch: missing {missing}, unexpected {extra}")
        self.config = config
        self._tensors = {name: tensors[name] for name in self.names(config)}

    @staticmethod
    def names(config: ModelConfig) -> list[str]:
        out = ["src_embed", "tgt_embed"]
        for l in range(config.num_layers):
            out += _attn_param_names(f"enc{l}.attn")
            out += [f"enc{l}.ln1.gain", f"enc{l}.ln1.bias"]
            out += [f"enc{l}.ffn.w1", f"enc{l}.ffn.b1",
                    f"enc{l}.ffn.w2", f"enc{l}.ffn.b2"]
            out += [f"enc{l}.ln2.gain", f"enc{l}.ln2.bias"]
        for l in range(config.num_layers):
            out += _attn_param_names(f"dec{l}.self")
            out += [f"dec{l}.ln1.gain", f"dec{l}.ln1.bias"]
            out += _attn_param_names(f"dec{l}.cross")
            out += [f"dec{l}.ln2.gain", f"dec{l}.ln2.bias"]
            out += [f"dec{l}.ffn.w1", f"dec{l}.ffn.b1",
                    f"dec{l}.ffn.w2", f"dec{l}.ffn.b2"]
            out += [f"dec{l}.ln3.gain", f"dec{l}.ln3.bias"]
        out += ["out.w", "out.b"]
        return out

    @classmethod
    def init(cls, config: ModelConfig, hub: RngHub) -> "Parameters":
        """Glorot-uniform linear weights, N(0, d^-1/2) embeddings, identity
        layer norms. Each tensor draws from its own named stream so the
        initialization is independent of construction order."""
        d = config.d_model
        tensors: dict[str, Tensor] = {}

        def glorot(name: str, fan_in: int, fan_out: int):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = hub.stream(f"init.{name}").uniform(-limit, limit,
                                                      size=(fan_in, fan_out))
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)

        def zeros(name: str, shape):
            tensors[name] = Tensor(np.zeros(shape, np.float32), requires_grad=True)

        def ones(name: str, shape):
            tensors[name] = Tensor(np.ones(shape, np.float32), requires_grad=True)

        for side, vocab in (("src_embed", config.src_vocab_size),
                            ("tgt_embed", config.tgt_vocab_size)):
            data = hub.stream(f"init.{side}").normal(0.0, d ** -0.5, size=(vocab, d))
            tensors[side] = Tensor(data.astype(np.float32), requires_grad=True)

        for name in cls.names(config):
            if name in tensors:
                continue
            if name.endswith((".wq", ".wk", ".wv", ".wo")):
                glorot(name, d, d)
            elif name.endswith((".bq", ".bv", ".bo")):
                zeros(name, (d,))
            elif name.endswith(".ffn.w1"):
                glorot(name, d, config.d_ff)
            elif name.endswith(".ffn.b1"):
                zeros(name, (config.d_ff,))
            elif name.endswith(".ffn.w2"):
                glorot(name, config.d_ff, d)
            elif name.endswith(".ffn.b2"):
                zeros(name, (d,))
            elif name.endswith(".gain"):
                ones(name, (d,))
            elif name.endswith(".bias"):
                zeros(name, (d,))
            elif name == "out.w":
                glorot(name, d, config.tgt_vocab_size)
            elif name == "out.b":
                zeros(name, (config.tgt_vocab_size,))
            else:  # pragma: no cover - names() and init() must stay in sync
                raise AssertionError(name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._tensors.values())

    def cast(self, dtype) -> "Parameters":
        return Parameters(self.config, {
            name: Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self.items()})


@dataclass
class EncoderOutput:
    """Encoder hidden states plus the source padding mask (True = real)."""

    h: Tensor                 # [B, I, d_model]
    src_keep: np.ndarray      # [B, I] bool

    def __post_init__(self):
        if self.h.shape[:2] != self.src_keep.shape:
            raise ShapeMismatchError(
                f"encoder states {self.h.shape} vs mask {self.src_keep.shape}")


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


class Transformer:
    """Encoder-decoder stack; all methods are pure functions of the
    parameters, so one instance can serve training and decoding."""

    def __init__(self, config: ModelConfig, params: Parameters):
        self.config = config
        self.params = params
        self._pe = sinusoidal_positions(config.max_len, config.d_model)

    # -- embeddings ---------------------------------------------------------

    def embed_source(self, tokens) -> Tensor:
        emb = T.embedding_lookup(self.params["src_embed"], tokens)
        return T.mul(emb, math.sqrt(self.config.d_model))

    def embed_target(self, tokens) -> Tensor:
        emb = T.embedding_lookup(self.params["tgt_embed"], tokens)
        return T.mul(emb, math.sqrt(self.config.d_model))

    # -- shared blocks ------------------------------------------------------

    def _positions(self, length: int, dtype) -> np.ndarray:
        if length > self.config.max_len:
            raise ContractViolation(
                f"sequence length {length} exceeds max_len {self.config.max_len}")
        return self._pe[:length].astype(dtype, copy=False)

    def _dropout(self, x: Tensor, rng) -> Tensor:
        if rng is None:
            return x
        return T.dropout(x, self.config.dropout, rng)

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor,
                   keep: np.ndarray | None, rng) -> Tensor:
        """Multi-head attention. ``keep`` broadcasts against the score
        tensor [B, heads, Tq, Tk]; True marks attendable keys."""
        p = self.params
        cfg = self.config
        B, Tq, d = x_q.shape
        Tk = x_kv.shape[1]
        h, dk = cfg.num_heads, cfg.d_head

        def heads_of(x, w, b, length):
            proj = T.matmul(x, p[f"{prefix}.{w}"])
            if b is not None:
                proj = T.add(proj, p[f"{prefix}.{b}"])
            return T.transpose(T.reshape(proj, (B, length, h, dk)), (0, 2, 1, 3))

        q = heads_of(x_q, "wq", "bq", Tq)
        k = heads_of(x_kv, "wk", None, Tk)
        v = heads_of(x_kv, "wv", "bv", Tk)

        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        if keep is not None:
            scores = T.masked_fill_neg_inf(scores, keep)
        attn = self._dropout(T.softmax(scores, axis=-1), rng)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, Tq, d))
        return T.add(T.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _post_norm(self, prefix: str, residual: Tensor, sublayer_out: Tensor,
                   rng) -> Tensor:
        p = self.params
        return T.layer_norm(T.add(residual, self._dropout(sublayer_out, rng)),
                            p[f"{prefix}.gain"], p[f"{prefix}.bias"])

    # -- encoder ------------------------------------------------------------

    def encode(self, mixed_embeddings: Tensor, src_keep,
               rng=None, add_positions: bool = True) -> EncoderOutput:
        x, _ = _as_batched(mixed_embeddings)
        keep = np.atleast_2d(np.asarray(src_keep, dtype=bool))
        B, I, d = x.shape
        if keep.shape != (B, I):
            raise ShapeMismatchError(
                f"encode: mask shape {keep.shape} vs embeddings ({B}, {I})")
        if add_positions:
            x = T.add(x, Tensor(self._positions(I, x.dtype)))
        x = self._dropout(x, rng)
        key_keep = keep[:, None, None, :]
        for l in range(self.config.num_layers):
            attn = self._attention(f"enc{l}.attn", x, x, key_keep, rng)
            x = self._post_norm(f"enc{l}.ln1", x, attn, rng)
            x = self._post_norm(f"enc{l}.ln2", x, self._ffn(f"enc{l}.ffn", x), rng)
        return EncoderOutput(h=x, src_keep=keep)

    # -- decoder: full-prefix graph route ------------------------------------

    def decode_full(self, enc: EncoderOutput, tgt_embeddings: Tensor,
                    rng=None, add_positions: bool = True) -> Tensor:
        """Logits [B, T, V_tgt] for every prefix position at once."""
        x, _ = _as_batched(tgt_embeddings)
        B, Tlen, d = x.shape
        if enc.h.shape[0] != B:
            raise ShapeMismatchError(
                f"decode: batch {B} vs encoder batch {enc.h.shape[0]}")
        if add_positions:
            x = T.add(x, Tensor(self._positions(Tlen, x.dtype)))
        x = self._dropout(x, rng)
        causal = np.tril(np.ones((Tlen, Tlen), dtype=bool))[None, None]
        cross_keep = enc.src_keep[:, None, None, :]
        for l in range(self.config.num_layers):
            self_attn = self._attention(f"dec{l}.self", x, x, causal, rng)
            x = self._post_norm(f"dec{l}.ln1", x, self_attn, rng)
            cross = self._attention(f"dec{l}.cross", x, enc.h, cross_keep, rng)
            x = self._post_norm(f"dec{l}.ln2", x, cross, rng)
            x = self._post_norm(f"dec{l}.ln3", x, self._ffn(f"dec{l}.ffn", x), rng)
        return T.add(T.matmul(x, self.params["out.w"]), self.params["out.b"])

    def decode_step(self, enc: EncoderOutput, prefix_embeddings: Tensor) -> Tensor:
        """Next-token logits [V_tgt] for a single prefix, recomputed from
        scratch. Reference route for the cached decoder."""
        x, was_single = _as_batched(prefix_embeddings)
        if x.shape[1] < 1:
            raise ContractViolation("decode_step requires a prefix of length >= 1")
        logits = self.decode_full(enc, x)
        return logits[0, -1] if was_single or x.shape[0] == 1 else logits[:, -1]

    # -- training loss -------------------------------------------------------

    def forward_train(self, src_embeddings: Tensor, src_keep,
                      tgt_input_embeddings: Tensor, soft_labels,
                      label_weights, rng=None) -> Tensor:
        """Scalar weighted cross entropy; ``soft_labels`` are already
        smoothed/mixed distributions, ``label_weights`` zero out padding."""
        enc = self.encode(src_embeddings, src_keep, rng=rng)
        logits = self.decode_full(enc, tgt_input_embeddings, rng=rng)
        V = self.config.tgt_vocab_size
        labels = np.asarray(soft_labels)
        weights = np.asarray(label_weights)
        return T.cross_entropy_soft(T.reshape(logits, (-1, V)),
                                    labels.reshape(-1, V), weights.reshape(-1))

    def start_decoder(self, enc: EncoderOutput) -> "IncrementalDecoder":
        return IncrementalDecoder(self, enc)


class IncrementalDecoder:
    """Plain-numpy decoder with per-layer self-attention caches and
    precomputed cross-attention keys/values. No gradients, no dropout."""

    def __init__(self, model: Transformer, enc: EncoderOutput):
        self.model = model
        cfg = model.config
        p = model.params
        h_enc = enc.h.data
        B = h_enc.shape[0]
        self._B = B
        self._pos = 0
        self._pe = model._pe
        # Cross-attention K/V never change during decoding.
        self._cross_k = []
        self._cross_v = []
        self._self_k: list[np.ndarray] = []
        self._self_v: list[np.ndarray] = []
        self._cross_keep = enc.src_keep[:, None, None, :]
        for l in range(cfg.num_layers):
            pre = f"dec{l}.cross"
            self._cross_k.append(self._heads(h_enc @ p[f"{pre}.wk"].data))
            self._cross_v.append(self._heads(
                h_enc @ p[f"{pre}.wv"].data + p[f"{pre}.bv"].data))
            dk = cfg.d_head
            empty = np.zeros((B, cfg.num_heads, 0, dk), dtype=h_enc.dtype)
            self._self_k.append(empty)
            self._self_v.append(empty.copy())

    def _heads(self, x: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        B, Tk, d = x.shape
        return x.reshape(B, Tk, cfg.num_heads, cfg.d_head).transpose(0, 2, 1, 3)

    @staticmethod
    def _ln(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
            eps: float = 1e-5) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * gain + bias

    @staticmethod
    def _softmax(x: np.ndarray) -> np.ndarray:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def step(self, embedding: np.ndarray) -> np.ndarray:
        """Feed the (mixed, scaled) embedding for the next position; returns
        next-token logits [B, V_tgt]."""
        cfg = self.model.config
        p = self.model.params
        if self._pos >= cfg.max_len:
            raise ContractViolation(
                f"decoder exceeded max_len {cfg.max_len}")
        x = np.asarray(embedding)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape != (self._B, cfg.d_model):
            raise ShapeMismatchError(
                f"decoder step: embedding {x.shape}, expected ({self._B}, {cfg.d_model})")
        x = x + self._pe[self._pos].astype(x.dtype)
        x = x[:, None, :]  # [B, 1, d]
        scale = 1.0 / math.sqrt(cfg.d_head)

        for l in range(cfg.num_layers):
            pre = f"dec{l}.self"
            q = self._heads(x @ p[f"{pre}.wq"].data + p[f"{pre}.bq"].data)
            k_new = self._heads(x @ p[f"{pre}.wk"].data)
            v_new = self._heads(x @ p[f"{pre}.wv"].data + p[f"{pre}.bv"].data)
            self._self_k[l] = np.concatenate([self._self_k[l], k_new], axis=2)
            self._self_v[l] = np.concatenate([self._self_v[l], v_new], axis=2)
            scores = q @ self._self_k[l].swapaxes(-1, -2) * scale
            ctx = self._softmax(scores) @ self._self_v[l]
            ctx = ctx.transpose(0, 2, 1, 3).reshape(self._B, 1, cfg.d_model)
            attn = ctx @ p[f"{pre}.wo"].data + p[f"{pre}.bo"].data
            x = self._ln(x + attn, p[f"dec{l}.ln1.gain"].data,
                         p[f"dec{l}.ln1.bias"].data)

            pre = f"dec{l}.cross"
            q = self._heads(x @ p[f"{pre}.wq"].data + p[f"{pre}.bq"].data)
            scores = q @ self._cross_k[l].swapaxes(-1, -2) * scale
            scores = np.where(self._cross_keep, scores,
                              np.asarray(-np.inf, dtype=scores.dtype))
            ctx = self._softmax(scores) @ self._cross_v[l]
            ctx = ctx.transpose(0, 2, 1, 3).reshape(self._B, 1, cfg.d_model)
            cross = ctx @ p[f"{pre}.wo"].data + p[f"{pre}.bo"].data
            x = self._ln(x + cross, p[f"dec{l}.ln2.gain"].data,
                         p[f"dec{l}.ln2.bias"].data)

            pre = f"dec{l}.ffn"
            hidden = np.maximum(x @ p[f"{pre}.w1"].data + p[f"{pre}.b1"].data, 0)
            ffn = hidden @ p[f"{pre}.w2"].data + p[f"{pre}.b2"].data
            x = self._ln(x + ffn, p[f"dec{l}.ln3.gain"].data,
                         p[f"dec{l}.ln3.bias"].data)

        self._pos += 1
        logits = x[:, 0, :] @ p["out.w"].data + p["out.b"].data
        return logits

    def reorder(self, indices) -> None:
        """Permute the batch dimension of all caches (beam reordering)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.shape != (self._B,):
            raise ShapeMismatchError(
                f"reorder: got {idx.shape}, expected ({self._B},)")
        for l in range(len(self._self_k)):
            self._self_k[l] = self._self_k[l][idx]
            self._self_v[l] = self._self_v[l][idx]
            self._cross_k[l] = self._cross_k[l][idx]
            self._cross_v[l] = self._cross_v[l][idx]
        self._cross_keep = self._cross_keep[idx]
