"""Command-line surface: corpus synthesis, training, decoding, evaluation,
tau sweeps over the diversity knob, and gradient verification.

Conventions shared by every subcommand:

- options may come from a ``key = value`` config file (``--config``);
  command-line flags win over file values, file values win over defaults;
- every output artifact starts with ``#`` header lines echoing the resolved
  configuration and master seed, so any artifact can be regenerated from its
  own header; keys that cannot affect content (the artifact's own path,
  ``workers``) are omitted so reruns are byte-comparable;
- exit codes: 0 success, 2 usage/configuration errors, 3 numerical failure,
  4 file I/O and file-format errors. ``gradcheck`` exits 1 when the check
  itself fails, mirroring diff-style verdict commands.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_model, save_model
from .corpus import (EOS_ID, ParallelCorpus, SynthSpec, Vocab,
                     bucket_by_source_length, generate_synthetic_corpus,
                     load_parallel)
from .errors import (ContractViolation, CorpusAlignmentError, FileFormatError,
                     NumericalError)
from .gradcheck import GradCheckConfig, run_gradcheck
from .metrics import (CSV_HEADER, MetricsReport, corpus_bleu, evaluate_run,
                      parse_hypotheses, pwb, read_references, rfb)
from .mixup_decode import DecodeConfig, beam_search, diverse_translate
from .mixup_train import MixupConfig, TrainStats, train_steps
from .model import ModelConfig, Parameters, Transformer
from .rng import RngHub
from .tensor import AdamState


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# option plumbing


def _on_off(raw: str) -> bool:
    if raw == "on":
        return True
    if raw == "off":
        return False
    raise ValueError("expected 'on' or 'off'")


def _opt_float(raw: str):
    return None if raw == "none" else float(raw)


def _float_list(raw: str) -> tuple[float, ...]:
    values = tuple(float(part) for part in raw.split(","))
    if not values:
        raise ValueError("empty list")
    return values


def _int_list(raw: str) -> tuple[int, ...]:
    values = tuple(int(part) for part in raw.split(","))
    if not values:
        raise ValueError("empty list")
    return values


@dataclass(frozen=True)
class Opt:
    """One named option: config-file key, converter, default."""

    key: str
    convert: Callable[[str], object]
    default: object = None
    required: bool = False
    help: str = ""
    hidden: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _add_options(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="key = value file; flags override it")
    for opt in opts:
        parser.add_argument(opt.flag, dest=opt.key, default=None,
                            metavar="V",
                            help=argparse.SUPPRESS if opt.hidden else
                            (opt.help or opt.key))


def parse_config_file(path) -> dict[str, str]:
    """Line-oriented ``key = value``; blank lines and ``#`` comments ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_options(args: argparse.Namespace, opts: list[Opt]) -> dict:
    """Merge flag values over config-file values over defaults."""
    file_values: dict[str, str] = {}
    if args.config is not None:
        _require_file(args.config, "config file")
        file_values = parse_config_file(args.config)
        known = {o.key for o in opts}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise UsageError(
                f"{args.config}: unknown option(s) {', '.join(unknown)}")
    resolved = {}
    for opt in opts:
        raw = getattr(args, opt.key)
        if raw is None:
            raw = file_values.get(opt.key)
        if raw is None:
            if opt.required:
                raise UsageError(f"missing required option {opt.flag}")
            resolved[opt.key] = opt.default
            continue
        try:
            resolved[opt.key] = opt.convert(raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {opt.flag}: {raw!r} ({exc})")
    return resolved


def _render(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


def config_header(command: str, resolved: dict, exclude=()) -> list[str]:
    lines = [f"# command = {command}"]
    for key in sorted(resolved):
        if key not in exclude:
            lines.append(f"# {key} = {_render(resolved[key])}")
    return lines


def read_header(path) -> dict[str, str]:
    """Parse the leading ``# key = value`` block of an artifact."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for raw in f:
            if not raw.startswith("#"):
                break
            line = raw[1:].strip()
            if "=" in line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    return values


def _require_file(path, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_parent(path, what: str) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"directory for {what} does not exist: {parent}")


def _read_sentences(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.split():
            raise FileFormatError(f"{path}: empty sentence", line=lineno)
    return lines


# ---------------------------------------------------------------------------
# shared model/corpus loading


def _load_trained(checkpoint_path):
    """Model plus the vocabularies recorded in its header."""
    config, params, header, adam = load_model(checkpoint_path)
    for key in ("vocab.src", "vocab.tgt"):
        if key not in header:
            raise FileFormatError(f"{checkpoint_path}: missing {key} header")
    src_vocab = Vocab(header["vocab.src"].split(" "))
    tgt_vocab = Vocab(header["vocab.tgt"].split(" "))
    model = Transformer(config, params)
    return model, src_vocab, tgt_vocab, header, adam


def _hypothesis_tokens(hyp, tgt_vocab: Vocab) -> list[str]:
    ids = list(hyp.tokens)
    if ids and ids[-1] == EOS_ID:
        ids.pop()
    return tgt_vocab.decode(ids)


def _encode_inputs(path, src_vocab: Vocab) -> list[np.ndarray]:
    return [src_vocab.encode(line.split()) for line in _read_sentences(path)]


# ---------------------------------------------------------------------------
# synth


SYNTH_OPTS = [
    Opt("out", str, required=True, help="output directory"),
    Opt("vocab_size", int, 50, help="concepts per side"),
    Opt("num_pairs", int, 2000, help="training pairs"),
    Opt("min_len", int, 3, help="shortest source length"),
    Opt("max_len", int, 12, help="longest source length"),
    Opt("synonyms", int, 1, help="surface forms per target concept (N)"),
    Opt("seed", int, 0, help="master seed"),
]


def cmd_synth(resolved: dict) -> int:
    spec = SynthSpec(vocab_size=resolved["vocab_size"],
                     num_pairs=resolved["num_pairs"],
                     min_len=resolved["min_len"],
                     max_len=resolved["max_len"],
                     synonyms=resolved["synonyms"],
                     seed=resolved["seed"])
    corpus = generate_synthetic_corpus(spec)
    outdir = Path(resolved["out"])
    corpus.write(outdir)
    print(f"wrote {len(corpus.train)} training and {len(corpus.heldout)} "
          f"held-out pairs to {outdir}")
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_OPTS = [
    Opt("train_src", str, required=True, help="training source sentences"),
    Opt("train_tgt", str, required=True, help="training target sentences"),
    Opt("out", str, required=True, help="checkpoint path to write"),
    Opt("steps", int, 2000, help="optimizer steps to run (added when resuming)"),
    Opt("batch_tokens", int, 1024, help="approximate target tokens per batch"),
    Opt("mixup", _on_off, True, help="mixup training on|off"),
    Opt("alpha", float, 1.0, help="beta(alpha, alpha) for training lambda"),
    Opt("lr", float, 1e-3, help="peak learning rate"),
    Opt("warmup", int, 400, help="linear warmup steps"),
    Opt("num_layers", int, 2, help="encoder/decoder layers"),
    Opt("num_heads", int, 4, help="attention heads"),
    Opt("d_model", int, 64, help="model width"),
    Opt("d_ff", int, 256, help="feed-forward width"),
    Opt("max_len", int, 64, help="maximum sequence length"),
    Opt("dropout", float, 0.1, help="dropout rate"),
    Opt("label_smoothing", float, 0.1, help="label smoothing epsilon"),
    Opt("seed", int, 0, help="master seed"),
    Opt("log", str, None, help="training log path (default: OUT.log)"),
    Opt("resume", str, None, help="checkpoint to continue from"),
    Opt("force_lambda", _opt_float, None, hidden=True),
]

_MODEL_KEYS = ("num_layers", "num_heads", "d_model", "d_ff", "max_len",
               "dropout", "label_smoothing")


def _check_resume_consistency(args, resolved, config: ModelConfig,
                              header: dict[str, str]) -> int:
    """Model shape and seed come from the checkpoint; explicit conflicting
    flags are an error rather than a silent override."""
    for key in _MODEL_KEYS:
        if getattr(args, key) is not None and \
                resolved[key] != getattr(config, key):
            raise UsageError(
                f"--{key.replace('_', '-')} {resolved[key]} conflicts with "
                f"resumed checkpoint value {getattr(config, key)}")
    recorded_seed = int(header["train.seed"])
    if args.seed is not None and resolved["seed"] != recorded_seed:
        raise UsageError(
            f"--seed {resolved['seed']} conflicts with resumed checkpoint "
            f"seed {recorded_seed}")
    return recorded_seed


def cmd_train(resolved: dict, args: argparse.Namespace) -> int:
    _require_file(resolved["train_src"], "training source file")
    _require_file(resolved["train_tgt"], "training target file")
    _require_parent(resolved["out"], "checkpoint")
    if resolved["resume"] is not None:
        _require_file(resolved["resume"], "resume checkpoint")
    log_path = resolved["log"] or f"{resolved['out']}.log"
    _require_parent(log_path, "training log")

    if resolved["resume"] is not None:
        model, src_vocab, tgt_vocab, header, adam = \
            _load_trained(resolved["resume"])
        resolved["seed"] = _check_resume_consistency(
            args, resolved, model.config, header)
        for key in _MODEL_KEYS:
            resolved[key] = getattr(model.config, key)
        if adam is None:
            raise FileFormatError(
                f"{resolved['resume']}: no optimizer state; cannot resume")
        corpus = load_parallel(resolved["train_src"], resolved["train_tgt"],
                               src_vocab, tgt_vocab)
    else:
        corpus = load_parallel(resolved["train_src"], resolved["train_tgt"])
        src_vocab, tgt_vocab = corpus.src_vocab, corpus.tgt_vocab
        config = ModelConfig(
            src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
            num_layers=resolved["num_layers"], num_heads=resolved["num_heads"],
            d_model=resolved["d_model"], d_ff=resolved["d_ff"],
            max_len=resolved["max_len"], dropout=resolved["dropout"],
            label_smoothing=resolved["label_smoothing"])
        params = Parameters.init(config, RngHub(resolved["seed"]))
        model = Transformer(config, params)
        adam = AdamState(base_lr=resolved["lr"],
                         warmup_steps=resolved["warmup"])

    mean_tgt = sum(p.tgt.size + 1 for p in corpus.pairs) / len(corpus)
    batch_size = max(1, round(resolved["batch_tokens"] / mean_tgt))
    mixup = MixupConfig(alpha=resolved["alpha"], enabled=resolved["mixup"])
    hub = RngHub(resolved["seed"])

    header_lines = config_header("train", resolved, exclude=("out", "log"))
    with open(log_path, "w", encoding="utf-8", newline="\n") as log:
        for line in header_lines:
            print(line, file=log)
        print(f"# batch_size = {batch_size}", file=log)
        print("# columns: step loss lr batch_tokens", file=log)
        stats = train_steps(model, corpus, mixup, adam, hub,
                            num_steps=resolved["steps"],
                            batch_size=batch_size,
                            force_lambda=resolved["force_lambda"],
                            log_stream=log)

    extra = {f"train.{key}": _render(value) for key, value in sorted(
        resolved.items()) if key not in ("out", "log")}
    extra["vocab.src"] = " ".join(src_vocab.id_to_token)
    extra["vocab.tgt"] = " ".join(tgt_vocab.id_to_token)
    save_model(resolved["out"], model.config, model.params, extra, adam)

    print(f"trained {stats.steps} steps "
          f"(mean loss {stats.mean_loss:.4f}, final {stats.final_loss:.4f}, "
          f"{stats.total_tokens} target tokens)")
    print(f"checkpoint: {resolved['out']}")
    print(f"log: {log_path}")
    return 0


# ---------------------------------------------------------------------------
# decode


DECODE_OPTS = [
    Opt("checkpoint", str, required=True, help="trained model"),
    Opt("src", str, required=True, help="input sentences, one per line"),
    Opt("out", str, required=True, help="hypotheses file to write"),
    Opt("mode", str, "mixdiv", help="beam | mixdiv"),
    Opt("train_src", str, None, help="partner pool source (mixdiv mode)"),
    Opt("train_tgt", str, None, help="partner pool target (mixdiv mode)"),
    Opt("k", int, 5, help="hypotheses per input"),
    Opt("tau", float, 0.3, help="diversity knob (upper bound on alpha)"),
    Opt("beam", int, 4, help="beam size"),
    Opt("length_penalty", float, 0.6, help="length-normalization exponent"),
    Opt("max_out_len", int, 64, help="decoding length cap"),
    Opt("length_selection", _on_off, True,
        help="restrict partners to source lengths [I-1, I]"),
    Opt("similarity_weighting", _on_off, True,
        help="scale alpha by embedding distance"),
    Opt("fixed_alpha", _opt_float, None,
        help="alpha when similarity weighting is off (default: tau)"),
    Opt("seed", int, 0, help="master seed"),
    Opt("force_lambda", _opt_float, None, hidden=True),
]


def _decode_config(resolved: dict, model: Transformer) -> DecodeConfig:
    return DecodeConfig(
        K=resolved["k"], tau=resolved["tau"], beam_size=resolved["beam"],
        length_penalty=resolved["length_penalty"],
        max_out_len=min(resolved["max_out_len"], model.config.max_len),
        length_selection=resolved["length_selection"],
        similarity_weighting=resolved["similarity_weighting"],
        fixed_alpha=resolved["fixed_alpha"], seed=resolved["seed"],
        force_lambda=resolved["force_lambda"])


def cmd_decode(resolved: dict) -> int:
    if resolved["mode"] not in ("beam", "mixdiv"):
        raise UsageError(f"--mode must be beam or mixdiv, got {resolved['mode']!r}")
    _require_file(resolved["checkpoint"], "checkpoint")
    _require_file(resolved["src"], "input file")
    _require_parent(resolved["out"], "hypotheses file")
    if resolved["mode"] == "mixdiv":
        if resolved["train_src"] is None or resolved["train_tgt"] is None:
            raise UsageError("mixdiv mode needs --train-src and --train-tgt "
                             "for the partner pool")
        _require_file(resolved["train_src"], "partner pool source")
        _require_file(resolved["train_tgt"], "partner pool target")

    model, src_vocab, tgt_vocab, _, _ = _load_trained(resolved["checkpoint"])
    inputs = _encode_inputs(resolved["src"], src_vocab)
    config = _decode_config(resolved, model)

    lines: list[str] = []
    if resolved["mode"] == "beam":
        for i, x in enumerate(inputs):
            hyps = beam_search(model, x, beam_size=config.beam_size,
                               lp_exponent=config.length_penalty,
                               top_n=config.K,
                               max_out_len=config.max_out_len)
            for k, hyp in enumerate(hyps):
                text = " ".join(_hypothesis_tokens(hyp, tgt_vocab))
                lines.append(f"{i}\t{k}\t-1\t{text}")
    else:
        corpus = load_parallel(resolved["train_src"], resolved["train_tgt"],
                               src_vocab, tgt_vocab)
        buckets = bucket_by_source_length(corpus)
        hub = RngHub(resolved["seed"])
        for i, x in enumerate(inputs):
            out = diverse_translate(model, corpus, buckets, x, config, hub,
                                    input_key=str(i))
            for k, (hyp, partner) in enumerate(zip(out.hypotheses,
                                                   out.partners)):
                text = " ".join(_hypothesis_tokens(hyp, tgt_vocab))
                lines.append(f"{i}\t{k}\t{partner.pair_id}\t{text}")

    with open(resolved["out"], "w", encoding="utf-8", newline="\n") as f:
        for line in config_header("decode", resolved, exclude=("out",)):
            print(line, file=f)
        for line in lines:
            print(line, file=f)
    print(f"wrote {len(lines)} hypotheses for {len(inputs)} inputs "
          f"to {resolved['out']}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


EVALUATE_OPTS = [
    Opt("hyp", str, required=True, help="hypotheses file from decode"),
    Opt("ref", str, required=True, help="references, one per line"),
    Opt("baseline_bleu", float, None,
        help="R: corpus BLEU of the plain beam baseline (needed when K >= 2)"),
    Opt("csv", str, None, help="append the CSV row to this file"),
    Opt("sentence_level", _on_off, False,
        help="sentence-level rfb/pwb aggregation (sensitivity check)"),
]


def cmd_evaluate(resolved: dict) -> int:
    _require_file(resolved["hyp"], "hypotheses file")
    _require_file(resolved["ref"], "references file")
    if resolved["csv"] is not None:
        _require_parent(resolved["csv"], "CSV file")

    grouped, K = parse_hypotheses(resolved["hyp"])
    references = read_references(resolved["ref"])
    if len(grouped) != len(references):
        raise CorpusAlignmentError(
            f"{resolved['hyp']} covers {len(grouped)} inputs but "
            f"{resolved['ref']} has {len(references)} lines")

    if K == 1:
        score = corpus_bleu([hyps[0] for hyps in grouped], references)
        print(f"corpus_bleu  {score:8.4f}")
        if resolved["csv"] is not None:
            raise UsageError("CSV reporting needs K >= 2 hypotheses per input")
        return 0

    if resolved["baseline_bleu"] is None:
        raise UsageError("--baseline-bleu (R) is required when K >= 2")
    report = evaluate_run(resolved["hyp"], resolved["ref"],
                          resolved["baseline_bleu"],
                          sentence_level=resolved["sentence_level"])
    print(report.table())

    header = read_header(resolved["hyp"])
    if "tau" in header and "seed" in header:
        row = report.csv_line(float(header["tau"]), int(header["seed"]), K)
        print(CSV_HEADER)
        print(row)
        if resolved["csv"] is not None:
            csv_path = Path(resolved["csv"])
            new_file = not csv_path.exists()
            with open(csv_path, "a", encoding="utf-8", newline="\n") as f:
                if new_file:
                    print(CSV_HEADER, file=f)
                print(row, file=f)
    elif resolved["csv"] is not None:
        raise UsageError(f"{resolved['hyp']} has no tau/seed header echo; "
                         "cannot emit a CSV row")
    return 0


# ---------------------------------------------------------------------------
# sweep


SWEEP_OPTS = [
    Opt("checkpoint", str, required=True, help="trained model"),
    Opt("src", str, required=True, help="input sentences, one per line"),
    Opt("ref", str, required=True, help="references, one per line"),
    Opt("train_src", str, required=True, help="partner pool source"),
    Opt("train_tgt", str, required=True, help="partner pool target"),
    Opt("out", str, required=True, help="CSV path to write"),
    Opt("taus", _float_list, (0.1, 0.3, 0.5), help="comma-separated tau list"),
    Opt("seeds", _int_list, (0, 1, 2, 3, 4), help="comma-separated seed list"),
    Opt("k", int, 5, help="hypotheses per input"),
    Opt("beam", int, 4, help="beam size"),
    Opt("length_penalty", float, 0.6, help="length-normalization exponent"),
    Opt("max_out_len", int, 64, help="decoding length cap"),
    Opt("length_selection", _on_off, True,
        help="restrict partners to source lengths [I-1, I]"),
    Opt("similarity_weighting", _on_off, True,
        help="scale alpha by embedding distance"),
    Opt("fixed_alpha", _opt_float, None,
        help="alpha when similarity weighting is off (default: tau)"),
    Opt("workers", int, 1, help="concurrent (tau, seed) cells"),
]


def _sweep_cell(model, corpus, buckets, inputs, references, tgt_vocab,
                resolved: dict, tau: float, seed: int, R: float) -> str:
    """Decode + score one (tau, seed) cell; pure function of its arguments."""
    config = DecodeConfig(
        K=resolved["k"], tau=tau, beam_size=resolved["beam"],
        length_penalty=resolved["length_penalty"],
        max_out_len=min(resolved["max_out_len"], model.config.max_len),
        length_selection=resolved["length_selection"],
        similarity_weighting=resolved["similarity_weighting"],
        fixed_alpha=resolved["fixed_alpha"], seed=seed)
    hub = RngHub(seed)
    grouped = []
    for i, x in enumerate(inputs):
        out = diverse_translate(model, corpus, buckets, x, config, hub,
                                input_key=str(i))
        grouped.append([_hypothesis_tokens(h, tgt_vocab)
                        for h in out.hypotheses])
    report = MetricsReport.assemble(rfb(grouped, references), pwb(grouped), R)
    return report.csv_line(tau, seed, resolved["k"])


def _parse_existing_rows(path, expected_header: list[str]
                         ) -> tuple[dict[tuple[str, str], str], float | None]:
    """Rows reusable from an interrupted sweep, keyed by (tau, seed) text.

    A file whose header block differs from the current configuration is
    ignored entirely (stale results must not leak into a new sweep)."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    header = [line for line in lines if line.startswith("#")]
    if header != expected_header:
        print(f"note: {path} was produced by a different configuration; "
              "recomputing every row", file=sys.stderr)
        return {}, None
    rows: dict[tuple[str, str], str] = {}
    R = None
    for line in lines:
        if line.startswith("#") or line == CSV_HEADER or not line:
            continue
        fields = line.split(",")
        if len(fields) != len(CSV_HEADER.split(",")):
            continue  # partially written final line of an interrupted run
        rows[(fields[0], fields[1])] = line
        R = float(fields[6])
    return rows, R


def cmd_sweep(resolved: dict) -> int:
    for key, what in (("checkpoint", "checkpoint"), ("src", "input file"),
                      ("ref", "references file"),
                      ("train_src", "partner pool source"),
                      ("train_tgt", "partner pool target")):
        _require_file(resolved[key], what)
    _require_parent(resolved["out"], "CSV file")

    model, src_vocab, tgt_vocab, _, _ = _load_trained(resolved["checkpoint"])
    inputs = _encode_inputs(resolved["src"], src_vocab)
    references = read_references(resolved["ref"])
    if len(inputs) != len(references):
        raise CorpusAlignmentError(
            f"{resolved['src']} has {len(inputs)} inputs but "
            f"{resolved['ref']} has {len(references)} lines")
    corpus = load_parallel(resolved["train_src"], resolved["train_tgt"],
                           src_vocab, tgt_vocab)
    buckets = bucket_by_source_length(corpus)

    # The workers count never changes any cell's rng streams, so it is
    # execution infrastructure, not run configuration: keep it out of the
    # header so reruns are byte-identical regardless of parallelism.
    header = config_header("sweep", resolved, exclude=("out", "workers"))
    out_path = Path(resolved["out"])
    existing: dict[tuple[str, str], str] = {}
    R = None
    if out_path.exists():
        existing, R = _parse_existing_rows(out_path, header)

    cells = [(tau, seed) for tau in resolved["taus"]
             for seed in resolved["seeds"]]
    missing = [(tau, seed) for tau, seed in cells
               if (f"{tau:g}", str(seed)) not in existing]

    if R is None or missing:
        if R is None:
            # R comes from the same model decoded plainly: beam top-1.
            top1 = []
            for x in inputs:
                hyp = beam_search(
                    model, x, beam_size=resolved["beam"],
                    lp_exponent=resolved["length_penalty"], top_n=1,
                    max_out_len=min(resolved["max_out_len"],
                                    model.config.max_len))[0]
                top1.append(_hypothesis_tokens(hyp, tgt_vocab))
            R = corpus_bleu(top1, references)

        with ThreadPoolExecutor(max_workers=resolved["workers"]) as pool:
            futures = {
                (tau, seed): pool.submit(_sweep_cell, model, corpus, buckets,
                                         inputs, references, tgt_vocab,
                                         resolved, tau, seed, R)
                for tau, seed in missing}
            with open(out_path, "w", encoding="utf-8", newline="\n") as f:
                for line in header:
                    print(line, file=f)
                print(CSV_HEADER, file=f)
                f.flush()
                for tau, seed in cells:
                    key = (f"{tau:g}", str(seed))
                    if key in existing:
                        row = existing[key]
                    else:
                        row = futures[(tau, seed)].result()
                    print(row, file=f)
                    f.flush()
    print(f"sweep CSV: {out_path} ({len(cells)} rows, "
          f"{len(cells) - len(missing)} reused)")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


GRADCHECK_OPTS = [
    Opt("num_layers", int, GradCheckConfig.num_layers, help="layers"),
    Opt("d_model", int, GradCheckConfig.d_model, help="model width"),
    Opt("num_heads", int, GradCheckConfig.num_heads, help="attention heads"),
    Opt("d_ff", int, GradCheckConfig.d_ff, help="feed-forward width"),
    Opt("vocab_size", int, GradCheckConfig.vocab_size, help="toy vocab size"),
    Opt("step", float, GradCheckConfig.step, help="finite-difference step"),
    Opt("tolerance", float, GradCheckConfig.tolerance,
        help="relative-error bound"),
    Opt("seed", int, GradCheckConfig.seed, help="init seed"),
    Opt("mixup", _on_off, True, help="check the mixup training loss"),
    Opt("corrupt", _on_off, False,
        help="negative control: corrupt one gradient rule"),
]


def cmd_gradcheck(resolved: dict) -> int:
    config = GradCheckConfig(**resolved)
    result = run_gradcheck(config)
    print(result.table())
    return 0 if result.passed else 1


# ---------------------------------------------------------------------------
# dispatch


_COMMANDS: dict[str, tuple[list[Opt], str]] = {
    "synth": (SYNTH_OPTS, "generate a synthetic cipher/synonym corpus"),
    "train": (TRAIN_OPTS, "train a translation model"),
    "decode": (DECODE_OPTS, "translate with plain beam search or mixup decoding"),
    "evaluate": (EVALUATE_OPTS, "score a decode run (BLEU, rfb, pwb, EDA)"),
    "sweep": (SWEEP_OPTS, "decode + evaluate over a tau x seed grid"),
    "gradcheck": (GRADCHECK_OPTS, "verify analytic gradients (exit 1 on fail)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixdiv",
        description="Diverse machine translation via mixup at decode time.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts, help_text) in _COMMANDS.items():
        _add_options(sub.add_parser(name, help=help_text), opts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = resolve_options(args, _COMMANDS[args.command][0])
        if args.command == "synth":
            return cmd_synth(resolved)
        if args.command == "train":
            return cmd_train(resolved, args)
        if args.command == "decode":
            return cmd_decode(resolved)
        if args.command == "evaluate":
            return cmd_evaluate(resolved)
        if args.command == "sweep":
            return cmd_sweep(resolved)
        return cmd_gradcheck(resolved)
    except (UsageError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, FileFormatError, CorpusAlignmentError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
