"""BLEU machinery and the run-level evaluation suite.

Three numbers summarize a diverse-decoding run:

* ``rfb`` — reference BLEU: each of the K hypothesis ranks is treated as
  one system and scored (corpus-level) against the references; rfb is the
  mean over ranks.  Measures faithfulness.
* ``pwb`` — pairwise BLEU: mean corpus BLEU over all K·(K−1) ordered pairs
  of ranks, scoring one rank's hypotheses against another's as if they were
  references.  Measures how similar the K outputs are to each other (lower
  is more diverse).
* ``eda`` — Euclidean distance from the aim point (rfb=R, pwb=0), where R
  is the plain beam-search BLEU of the same trained model:
  ``100 * sqrt(((R - rfb)/R)^2 + (R/P)^2 * (pwb/P)^2)`` with P = 100.

BLEU here is plain 4-gram corpus BLEU: clipped n-gram precisions combined
by geometric mean, times the brevity penalty ``exp(min(0, 1 - ref/cand))``.
There is no smoothing: a zero precision at any order makes the score 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import tokenize
from .errors import ContractViolation, CorpusAlignmentError, FileFormatError

MAX_N = 4


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    """Sufficient statistics for corpus BLEU; additive across sentences."""

    matches: tuple[int, ...]
    totals: tuple[int, ...]
    cand_len: int
    ref_len: int

    def __post_init__(self):
        if len(self.matches) != MAX_N or len(self.totals) != MAX_N:
            raise ContractViolation("BleuStats carries counts for n=1..4")
        for m, t in zip(self.matches, self.totals):
            if not 0 <= m <= t:
                raise ContractViolation(
                    f"clipped matches must lie in [0, totals], got {m}/{t}")
        if self.cand_len < 0 or self.ref_len < 0:
            raise ContractViolation("lengths must be non-negative")

    @classmethod
    def empty(cls) -> "BleuStats":
        return cls((0,) * MAX_N, (0,) * MAX_N, 0, 0)

    @classmethod
    def from_sentence(cls, candidate, reference) -> "BleuStats":
        matches = []
        totals = []
        for n in range(1, MAX_N + 1):
            cand = _ngram_counts(candidate, n)
            ref = _ngram_counts(reference, n)
            totals.append(sum(cand.values()))
            matches.append(sum(min(c, ref[g]) for g, c in cand.items()))
        return cls(tuple(matches), tuple(totals), len(candidate),
                   len(reference))

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            tuple(a + b for a, b in zip(self.matches, other.matches)),
            tuple(a + b for a, b in zip(self.totals, other.totals)),
            self.cand_len + other.cand_len,
            self.ref_len + other.ref_len)

    def score(self) -> float:
        """Corpus BLEU percent for the accumulated counts (0 on any zero)."""
        if self.cand_len == 0:
            return 0.0
        if any(t == 0 for t in self.totals) or any(m == 0 for m in self.matches):
            return 0.0
        log_precision = math.fsum(
            math.log(m / t) for m, t in zip(self.matches, self.totals)) / MAX_N
        brevity = math.exp(min(0.0, 1.0 - self.ref_len / self.cand_len))
        return 100.0 * brevity * math.exp(log_precision)


def corpus_bleu(hypotheses, references) -> float:
    """4-gram corpus BLEU percent of one hypothesis per reference."""
    if len(hypotheses) != len(references):
        raise ContractViolation(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractViolation("corpus BLEU of an empty corpus")
    stats = BleuStats.empty()
    for hyp, ref in zip(hypotheses, references):
        stats = stats + BleuStats.from_sentence(hyp, ref)
    return stats.score()


def _system_bleu(candidates, references, sentence_level: bool) -> float:
    if not sentence_level:
        return corpus_bleu(candidates, references)
    scores = [BleuStats.from_sentence(c, r).score()
              for c, r in zip(candidates, references)]
    return sum(scores) / len(scores)


def _check_grouped(grouped) -> int:
    if not grouped:
        raise ContractViolation("no inputs to evaluate")
    K = len(grouped[0])
    for i, hyps in enumerate(grouped):
        if len(hyps) != K:
            raise ContractViolation(
                f"input {i} has {len(hyps)} hypotheses, expected K={K}")
    if K == 0:
        raise ContractViolation("inputs carry zero hypotheses")
    return K


def rfb(grouped, references, sentence_level: bool = False) -> float:
    """Mean over ranks k of the corpus BLEU of every input's k-th hypothesis
    against the references."""
    K = _check_grouped(grouped)
    if len(grouped) != len(references):
        raise ContractViolation(
            f"{len(grouped)} inputs vs {len(references)} references")
    per_rank = [_system_bleu([hyps[k] for hyps in grouped], references,
                             sentence_level) for k in range(K)]
    return sum(per_rank) / K


def pwb(grouped, sentence_level: bool = False) -> float:
    """Mean corpus BLEU over all ordered pairs of hypothesis ranks."""
    K = _check_grouped(grouped)
    if K < 2:
        raise ContractViolation("pairwise BLEU needs K >= 2 hypotheses")
    scores = []
    for a in range(K):
        for b in range(K):
            if a == b:
                continue
            scores.append(_system_bleu([hyps[a] for hyps in grouped],
                                       [hyps[b] for hyps in grouped],
                                       sentence_level))
    return sum(scores) / len(scores)


def eda(rfb_value: float, pwb_value: float, R: float, P: float = 100.0) -> float:
    """Distance from the aim point (rfb=R, pwb=0), pwb downweighted by R/P."""
    if R <= 0:
        raise ContractViolation(f"baseline BLEU R must be positive, got {R}")
    if rfb_value < 0:
        raise ContractViolation(f"rfb must be non-negative, got {rfb_value}")
    if not 0 <= pwb_value <= P:
        raise ContractViolation(f"pwb must lie in [0, {P}], got {pwb_value}")
    omega = R / P
    return 100.0 * math.sqrt(((R - rfb_value) / R) ** 2
                             + omega ** 2 * (pwb_value / P) ** 2)


@dataclass(frozen=True)
class MetricsReport:
    rfb: float
    pwb: float
    eda: float
    R: float
    P: float = 100.0
    omega: float = field(default=0.0)
    rfb_exceeds_baseline: bool = False

    def __post_init__(self):
        if not 0 <= self.rfb <= 100:
            raise ContractViolation(f"rfb out of [0, 100]: {self.rfb}")
        if not 0 <= self.pwb <= self.P:
            raise ContractViolation(f"pwb out of [0, {self.P}]: {self.pwb}")
        if self.eda < 0:
            raise ContractViolation(f"eda must be non-negative: {self.eda}")
        if self.omega != self.R / self.P:
            raise ContractViolation("omega must equal R/P exactly")

    @classmethod
    def assemble(cls, rfb_value: float, pwb_value: float, R: float,
                 P: float = 100.0) -> "MetricsReport":
        return cls(rfb=rfb_value, pwb=pwb_value,
                   eda=eda(rfb_value, pwb_value, R, P), R=R, P=P,
                   omega=R / P, rfb_exceeds_baseline=rfb_value > R)

    def table(self) -> str:
        lines = [
            "metric  value",
            f"rfb     {self.rfb:8.4f}",
            f"pwb     {self.pwb:8.4f}",
            f"eda     {self.eda:8.4f}",
            f"R       {self.R:8.4f}",
            f"omega   {self.omega:8.4f}",
        ]
        if self.rfb_exceeds_baseline:
            lines.append("note: rfb exceeds the baseline R")
        return "\n".join(lines)

    def csv_line(self, tau: float, seed: int, K: int) -> str:
        return (f"{tau:g},{seed},{K},{self.rfb:.4f},{self.pwb:.4f},"
                f"{self.eda:.4f},{self.R:.4f}")


CSV_HEADER = "tau,seed,K,rfb,pwb,eda,R"


def parse_hypotheses(path) -> tuple[list[list[list[str]]], int]:
    """Read a decode output file into per-input lists of K token lists.

    Lines are ``input_idx<TAB>hyp_idx<TAB>partner_id<TAB>translation``;
    ``#`` lines and blank lines are ignored.  Inputs must be 0..N-1 and each
    must carry hypotheses 0..K-1 exactly once.
    """
    entries: dict[int, dict[int, list[str]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FileFormatError(
                    f"{path}: line {lineno}: expected 4 tab-separated "
                    f"fields, got {len(parts)}")
            try:
                input_idx, hyp_idx = int(parts[0]), int(parts[1])
                int(parts[2])
            except ValueError:
                raise FileFormatError(
                    f"{path}: line {lineno}: non-integer index field") from None
            if input_idx < 0 or hyp_idx < 0:
                raise FileFormatError(
                    f"{path}: line {lineno}: negative index")
            per_input = entries.setdefault(input_idx, {})
            if hyp_idx in per_input:
                raise FileFormatError(
                    f"{path}: line {lineno}: duplicate hypothesis "
                    f"{hyp_idx} for input {input_idx}")
            per_input[hyp_idx] = tokenize(parts[3])
    if not entries:
        raise FileFormatError(f"{path}: no hypothesis lines")
    n = max(entries) + 1
    grouped = []
    K = None
    for i in range(n):
        if i not in entries:
            raise FileFormatError(f"{path}: missing input index {i}")
        per_input = entries[i]
        if K is None:
            K = len(per_input)
        if sorted(per_input) != list(range(K)):
            raise FileFormatError(
                f"{path}: input {i} has hypothesis indices "
                f"{sorted(per_input)}, expected 0..{K - 1}")
        grouped.append([per_input[k] for k in range(K)])
    return grouped, K


def read_references(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [tokenize(line.rstrip("\n")) for line in f]


def evaluate_run(hyp_path, ref_path, R: float,
                 sentence_level: bool = False) -> MetricsReport:
    """Score a decode output file against references and assemble a report."""
    grouped, K = parse_hypotheses(hyp_path)
    references = read_references(ref_path)
    if len(grouped) != len(references):
        raise CorpusAlignmentError(
            f"{hyp_path} covers {len(grouped)} inputs but {ref_path} has "
            f"{len(references)} lines")
    if K < 2:
        raise ContractViolation(
            "run evaluation needs K >= 2 hypotheses per input for pwb")
    return MetricsReport.assemble(
        rfb(grouped, references, sentence_level),
        pwb(grouped, sentence_level), R)
