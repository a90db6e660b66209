"""Corpus handling: parallel file ingestion, vocabulary construction,
length-bucketed partner sampling, and a synthetic one-to-many corpus.

The synthetic language is a token-level concept cipher: source sentences are
random concept symbols, each deterministically mapped to a target concept
that surfaces as one of N synonym tokens. With N=1 translation is a bijective
cipher (a model can reach BLEU 100); with N>1 every source has many correct
translations, so output diversity is measurable against ground truth.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractViolation, CorpusAlignmentError
from .rng import RngHub, _fnv1a64

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(line: str) -> list[str]:
    """Whitespace tokenization (the only segmentation used here)."""
    return line.split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


@dataclass
class Vocab:
    """Frequency-ordered token inventory with four reserved ids."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != RESERVED_TOKENS:
            raise ContractViolation(
                f"vocab must start with {RESERVED_TOKENS}, got "
                f"{self.id_to_token[:4]}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractViolation("vocab contains duplicate tokens")

    @classmethod
    def build(cls, counts: Counter) -> "Vocab":
        """Most frequent first; ties broken lexicographically."""
        ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
        return cls(list(RESERVED_TOKENS) + ordered)

    @classmethod
    def from_sentences(cls, sentences) -> "Vocab":
        counts: Counter = Counter()
        for sent in sentences:
            counts.update(sent)
        return cls.build(counts)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens) -> np.ndarray:
        """Unknown tokens map to <unk>."""
        return np.array([self.token_to_id.get(t, UNK_ID) for t in tokens],
                        dtype=np.int64)

    def decode(self, ids) -> list[str]:
        out = []
        for i in np.asarray(ids).tolist():
            if not 0 <= i < len(self.id_to_token):
                raise ContractViolation(f"token id {i} outside vocab of {len(self)}")
            out.append(self.id_to_token[i])
        return out


@dataclass
class SentencePair:
    """One aligned pair as token ids, without <bos>/<eos> framing."""

    pair_id: int
    src: np.ndarray
    tgt: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.tgt = np.asarray(self.tgt, dtype=np.int64)
        if self.src.size == 0 or self.tgt.size == 0:
            raise ContractViolation(f"pair {self.pair_id}: empty side")


@dataclass
class ParallelCorpus:
    pairs: list[SentencePair]
    src_vocab: Vocab
    tgt_vocab: Vocab
    _source_index: dict[tuple, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        for idx, pair in enumerate(self.pairs):
            if pair.pair_id != idx:
                raise ContractViolation(
                    f"pair ids must be dense: position {idx} holds id {pair.pair_id}")
        self._source_index = {}
        for pair in self.pairs:
            self._source_index.setdefault(tuple(pair.src.tolist()),
                                          []).append(pair.pair_id)

    def __len__(self) -> int:
        return len(self.pairs)

    def find_source(self, src_ids) -> list[int]:
        """Pair ids whose source equals ``src_ids`` exactly (used to keep a
        decoded training sentence from partnering with itself)."""
        return list(self._source_index.get(tuple(np.asarray(src_ids).tolist()), []))


@dataclass
class LengthBuckets:
    """Pair ids grouped by exact source length."""

    by_length: dict[int, list[int]]

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.by_length.values())

    def pool(self, lo: int, hi: int) -> list[int]:
        """All pair ids with source length in [lo, hi], ascending ids."""
        out: list[int] = []
        for length in sorted(self.by_length):
            if lo <= length <= hi:
                out.extend(self.by_length[length])
        out.sort()
        return out


def bucket_by_source_length(corpus: ParallelCorpus) -> LengthBuckets:
    if len(corpus) == 0:
        raise ContractViolation("cannot bucket an empty corpus")
    by_length: dict[int, list[int]] = {}
    for pair in corpus.pairs:
        by_length.setdefault(int(pair.src.size), []).append(pair.pair_id)
    return LengthBuckets(by_length)


def sample_partners(buckets: LengthBuckets, input_length: int, K: int,
                    rng: np.random.Generator,
                    exclude_ids=()) -> tuple[list[int], bool]:
    """Draw K distinct pair ids uniformly from buckets [I-1, I], excluding
    ``exclude_ids``. If that window is too sparse it widens symmetrically to
    [I-w, I+w-1] until K candidates exist; if the whole corpus (minus
    exclusions) holds fewer than K, all of it is returned with a shortfall
    flag."""
    if K < 1:
        raise ContractViolation(f"K must be >= 1, got {K}")
    excluded = set(int(e) for e in exclude_ids)
    lengths = sorted(buckets.by_length)
    lo_all, hi_all = lengths[0], lengths[-1]

    w = 1
    while True:
        lo, hi = input_length - w, input_length + w - 1
        pool = [pid for pid in buckets.pool(lo, hi) if pid not in excluded]
        if len(pool) >= K:
            break
        if lo <= lo_all and hi >= hi_all:
            return pool, True
        w += 1
    idx = rng.choice(len(pool), size=K, replace=False)
    return [pool[i] for i in sorted(idx.tolist())], False


# ---------------------------------------------------------------------------
# file ingestion


def _read_lines(path) -> list[str]:
    with open(path, "r", encoding="utf-8", newline=None) as f:
        text = f.read()
    return text.splitlines()


def corpus_from_lines(src_lines, tgt_lines, src_vocab: Vocab | None = None,
                      tgt_vocab: Vocab | None = None) -> ParallelCorpus:
    src_tok = [tokenize(line) for line in src_lines]
    tgt_tok = [tokenize(line) for line in tgt_lines]
    if src_vocab is None:
        src_vocab = Vocab.from_sentences(src_tok)
    if tgt_vocab is None:
        tgt_vocab = Vocab.from_sentences(tgt_tok)
    pairs = [SentencePair(i, src_vocab.encode(s), tgt_vocab.encode(t))
             for i, (s, t) in enumerate(zip(src_tok, tgt_tok))]
    return ParallelCorpus(pairs, src_vocab, tgt_vocab)


def load_parallel(src_path, tgt_path, src_vocab: Vocab | None = None,
                  tgt_vocab: Vocab | None = None) -> ParallelCorpus:
    """Read aligned one-sentence-per-line files. Unless fixed vocabularies
    are supplied (e.g. from a checkpoint), they are built from these lines
    in frequency order. Pairs with an empty side are skipped (with a
    warning saying how many)."""
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusAlignmentError(
            f"line counts differ: {src_path} has {len(src_lines)}, "
            f"{tgt_path} has {len(tgt_lines)}")
    kept_src, kept_tgt, skipped = [], [], 0
    for s, t in zip(src_lines, tgt_lines):
        if not s.split() or not t.split():
            skipped += 1
            continue
        kept_src.append(s)
        kept_tgt.append(t)
    if skipped:
        warnings.warn(f"skipped {skipped} empty-sided line(s) in "
                      f"{src_path}/{tgt_path}")
    return corpus_from_lines(kept_src, kept_tgt, src_vocab, tgt_vocab)


def write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line)
            f.write("\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for the concept-cipher language."""

    vocab_size: int      # concepts per side (surface tokens = concepts x synonyms)
    num_pairs: int
    min_len: int
    max_len: int
    synonyms: int = 1    # surface forms per target concept
    seed: int = 0

    def __post_init__(self):
        if self.synonyms < 1:
            raise ContractViolation("synonyms must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractViolation(
                f"bad length range [{self.min_len}, {self.max_len}]")
        if self.vocab_size < 1 or self.num_pairs < 1:
            raise ContractViolation("vocab_size and num_pairs must be positive")

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "SynthSpec":
        return cls(**{f.name: int(d[f.name]) for f in fields(cls)})


def _target_surface(concept: int, synonym: int, num_synonyms: int) -> str:
    return f"t{concept}" if num_synonyms == 1 else f"t{concept}_{synonym}"


@dataclass
class SyntheticCorpus:
    spec: SynthSpec
    cipher: np.ndarray           # source concept -> target concept
    train: ParallelCorpus
    heldout: ParallelCorpus
    train_lines: tuple[list[str], list[str]]
    heldout_lines: tuple[list[str], list[str]]

    def write(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_lines(outdir / "train.src", self.train_lines[0])
        write_lines(outdir / "train.tgt", self.train_lines[1])
        write_lines(outdir / "heldout.src", self.heldout_lines[0])
        write_lines(outdir / "heldout.tgt", self.heldout_lines[1])
        write_lines(outdir / "spec.txt",
                    [f"{k} = {v}" for k, v in self.spec.to_dict().items()])


def generate_synthetic_corpus(spec: SynthSpec) -> SyntheticCorpus:
    """Deterministic in ``spec.seed``: same spec, byte-identical files.
    Splits 90/10 train/held-out by a stable hash of the pair index; both
    splits are encoded with vocabularies built from the training split only."""
    hub = RngHub(spec.seed)
    cipher = hub.stream("cipher").permutation(spec.vocab_size)
    src_all: list[str] = []
    tgt_all: list[str] = []
    for i in range(spec.num_pairs):
        rng = hub.stream(f"pair.{i}")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        concepts = rng.integers(0, spec.vocab_size, size=n)
        synonyms = rng.integers(0, spec.synonyms, size=n)
        src_all.append(detokenize(f"s{c}" for c in concepts))
        tgt_all.append(detokenize(
            _target_surface(int(cipher[c]), int(k), spec.synonyms)
            for c, k in zip(concepts, synonyms)))

    heldout_mask = [_fnv1a64(f"split.{i}".encode()) % 10 == 0
                    for i in range(spec.num_pairs)]
    train_src = [s for s, h in zip(src_all, heldout_mask) if not h]
    train_tgt = [t for t, h in zip(tgt_all, heldout_mask) if not h]
    held_src = [s for s, h in zip(src_all, heldout_mask) if h]
    held_tgt = [t for t, h in zip(tgt_all, heldout_mask) if h]

    train = corpus_from_lines(train_src, train_tgt)
    heldout = corpus_from_lines(held_src, held_tgt,
                                src_vocab=train.src_vocab,
                                tgt_vocab=train.tgt_vocab)
    return SyntheticCorpus(spec=spec, cipher=cipher, train=train,
                           heldout=heldout,
                           train_lines=(train_src, train_tgt),
                           heldout_lines=(held_src, held_tgt))
