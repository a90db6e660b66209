"""Faithfulness/diversity trade-off sweep on the N=3 synonym corpus.

Synthesizes a corpus where every target concept has three interchangeable
surface forms, trains a mixup model, sweeps the interpolation temperature
tau over several decode seeds, and prints per-tau means: pwb should fall
(more diversity) and rfb drift down (less faithfulness) as tau grows.
"""

import argparse
import csv
import pathlib
import sys
from collections import defaultdict

from mixdiv.cli import main as mixdiv


def run(out: pathlib.Path, steps: int, taus: str, seeds: str, k: int,
        seed: int) -> None:
    data = out / "synonym"
    check(mixdiv(["synth", "--out", str(data), "--vocab-size", "50",
                  "--num-pairs", "2200", "--min-len", "3", "--max-len", "12",
                  "--synonyms", "3", "--seed", str(seed)]))
    ckpt = out / "model.ckpt"
    check(mixdiv(["train", "--train-src", str(data / "train.src"),
                  "--train-tgt", str(data / "train.tgt"), "--out", str(ckpt),
                  "--steps", str(steps), "--batch-tokens", "2048",
                  "--mixup", "on", "--alpha", "1.0", "--seed", str(seed)]))
    table = out / "sweep.csv"
    check(mixdiv(["sweep", "--checkpoint", str(ckpt),
                  "--src", str(data / "heldout.src"),
                  "--ref", str(data / "heldout.tgt"),
                  "--train-src", str(data / "train.src"),
                  "--train-tgt", str(data / "train.tgt"),
                  "--out", str(table), "--taus", taus, "--seeds", seeds,
                  "--k", str(k), "--max-out-len", "16"]))

    by_tau = defaultdict(list)
    with open(table) as f:
        rows = [l for l in f if not l.startswith("#")]
    for row in csv.DictReader(rows):
        by_tau[float(row["tau"])].append((float(row["rfb"]),
                                          float(row["pwb"]),
                                          float(row["eda"])))
    print(f"\nwrote {table}")
    print(f"{'tau':>5}  {'mean rfb':>9}  {'mean pwb':>9}  {'mean eda':>9}")
    for tau in sorted(by_tau):
        cells = by_tau[tau]
        means = [sum(col) / len(cells) for col in zip(*cells)]
        print(f"{tau:5.2f}  {means[0]:9.2f}  {means[1]:9.2f}  {means[2]:9.2f}")


def check(rc: int) -> None:
    if rc != 0:
        sys.exit(rc)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=pathlib.Path, default=pathlib.Path("runs/tradeoff"))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--taus", default="0.1,0.3,0.5")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    a = p.parse_args()
    run(a.out, a.steps, a.taus, a.seeds, a.k, a.seed)
