#!/usr/bin/env python3
"""Train the desk-scale 4-class baseline and report held-out accuracy.

Pins the seed and hyperparameters used by the acceptance suite: 4 digital
modulations, L=128 frames at 10 dB sensing SNR, a 16-dimensional embedding
and a 10 dB link in both directions.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from camc.mcnet import McConfig, MCNet
from camc.rng import stream
from camc.sigsynth import synthesize_dataset
from camc.splittrain import (
    LinkNoiseSpec, OptimizerConfig, evaluate, frames_to_arrays, train_offline,
)
from camc.sscnet import SscConfig, SSCNet

MODS = ["BPSK", "QPSK", "8PSK", "QAM16"]


def build_task(n_train_per_class, n_eval_per_class, L, snr_db, seed):
    frames, _ = synthesize_dataset(MODS, n_train_per_class, L,
                                   snr_db=snr_db, seed=seed)
    X, y = frames_to_arrays(frames, MODS)
    order = stream(seed, "desk/shuffle").permutation(len(X))
    X, y = X[order], y[order]
    n_val = len(X) // 10
    eval_frames, _ = synthesize_dataset(MODS, n_eval_per_class, L,
                                        snr_db=snr_db, seed=seed + 104729)
    X_te, y_te = frames_to_arrays(eval_frames, MODS)
    return (X[n_val:], y[n_val:]), (X[:n_val], y[:n_val]), (X_te, y_te)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-per-class", type=int, default=5000)
    ap.add_argument("--eval-per-class", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--patience", type=int, default=4)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--snr-db", type=float, default=10.0)
    ap.add_argument("--link-snr-db", type=float, default=10.0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    t0 = time.monotonic()
    train, val, test = build_task(args.n_per_class, args.eval_per_class,
                                  128, args.snr_db, args.seed)
    print(f"data ready in {time.monotonic() - t0:.1f}s "
          f"(train {len(train[0])}, val {len(val[0])}, test {len(test[0])})",
          flush=True)

    ssc = SSCNet(SscConfig(L=128, N=16), rng=stream(args.seed, "weights/ssc"))
    mc = MCNet(McConfig(N=16, M=4), rng=stream(args.seed, "weights/mc"))
    noise = LinkNoiseSpec(fwd_snr_db=args.link_snr_db, bwd_snr_db=args.link_snr_db)
    config = OptimizerConfig(rule="adaptive-moment", eta=0.001, batch=200,
                             epochs=args.epochs, seed=args.seed)
    report = train_offline(ssc, mc, train, val, 4, noise, config,
                           out_dir=args.out, patience=args.patience,
                           label_order=MODS)
    for line in report.lines():
        print(line, flush=True)

    loss, acc, confusion = evaluate(ssc, mc, *test, 4, noise,
                                    stream(args.seed, "desk/eval-link"))
    wall = time.monotonic() - t0
    print(f"test loss={loss:.4f} acc={acc:.4f} wall={wall:.0f}s")
    print(confusion)


if __name__ == "__main__":
    main()
