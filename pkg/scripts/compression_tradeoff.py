#!/usr/bin/env python3
"""Sweep pruning ratio and bit width on a small trained model and print the
accuracy / size / FLOPs trade-off table.

Trains a compact 2-class baseline in under a minute (or reuses --run-dir
checkpoints), then prunes, fine-tunes under frozen masks, quantizes and
evaluates each setting on a held-out split.
"""

import argparse
import copy
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from camc.compressor import (
    PruneSpec, apply_quantization, flops_report, net_compression_ratio,
    prune_params, serialized_sizes, weight_matrix_sizes,
)
from camc.mcnet import McConfig, MCNet
from camc.numcore.params import restore_into
from camc.rng import stream
from camc.sigsynth import synthesize_dataset
from camc.splittrain import (
    LinkNoiseSpec, Optimizer, OptimizerConfig, evaluate, frames_to_arrays,
    offline_step, one_hot, train_offline,
)
from camc.sscnet import SscConfig, SSCNet

MODS = ["BPSK", "QPSK", "8PSK", "QAM16"]
LAYERS = ["conv1", "conv2", "dense1", "bilstm1", "bilstm2",
          "attention", "dense2", "dense3"]


def fine_tune(ssc, mc, data, noise, config, masks_dev, masks_srv, epochs):
    X, y = data
    opt_d, opt_s = Optimizer(config), Optimizer(config)
    shuffle = stream(config.seed, "ft/shuffle")
    fwd, bwd = stream(config.seed, "ft/fwd"), stream(config.seed, "ft/bwd")
    dd, ds = stream(config.seed, "ft/drop-dev"), stream(config.seed, "ft/drop-srv")
    for _ in range(epochs):
        order = shuffle.permutation(len(X))
        for lo in range(0, len(order), config.batch):
            idx = order[lo:lo + config.batch]
            offline_step(ssc, mc, X[idx], one_hot(y[idx], len(MODS)), noise,
                         opt_d, opt_s, fwd, bwd, dd, ds,
                         masks_dev=masks_dev, masks_srv=masks_srv)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--run-dir", default=None,
                    help="reuse sscnet.camcw/mcnet.camcw from a training run")
    ap.add_argument("--n-per-class", type=int, default=1500)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--fine-tune-epochs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--ratios", default="0.0,0.3,0.5,0.7,0.9")
    ap.add_argument("--bits", default="8")
    args = ap.parse_args()

    frames, _ = synthesize_dataset(MODS, args.n_per_class, 128,
                                   snr_db=10.0, seed=args.seed)
    X, y = frames_to_arrays(frames, MODS)
    order = stream(args.seed, "sweep/shuffle").permutation(len(X))
    X, y = X[order], y[order]
    n_val = len(X) // 5
    train, val = (X[n_val:], y[n_val:]), (X[:n_val], y[:n_val])

    ssc = SSCNet(SscConfig(L=128, N=16), rng=stream(args.seed, "weights/ssc"))
    mc = MCNet(McConfig(N=16, M=len(MODS)), rng=stream(args.seed, "weights/mc"))
    noise = LinkNoiseSpec(fwd_snr_db=10.0, bwd_snr_db=10.0)
    config = OptimizerConfig(rule="adaptive-moment", eta=0.001, batch=200,
                             epochs=args.epochs, seed=args.seed)
    if args.run_dir:
        restore_into(ssc.params, Path(args.run_dir) / "sscnet.camcw")
        restore_into(mc.params, Path(args.run_dir) / "mcnet.camcw")
    else:
        train_offline(ssc, mc, train, val, len(MODS), noise, config, patience=3)
    _, base_acc, _ = evaluate(ssc, mc, *val, len(MODS), noise,
                              stream(args.seed, "sweep/eval"))
    print(f"baseline accuracy {base_acc:.4f}\n")
    print(f"{'rho':>5} {'bits':>4} {'accuracy':>8} {'gamma_ssc':>9} "
          f"{'ssc_bytes':>9} {'device_mflops':>13}")

    for rho in [float(r) for r in args.ratios.split(",")]:
        for b in [int(x) for x in args.bits.split(",")]:
            s, m = copy.deepcopy(ssc), copy.deepcopy(mc)
            spec = PruneSpec.uniform(rho, LAYERS)
            masks_d, _ = prune_params(s.params, spec)
            masks_s, _ = prune_params(m.params, spec)
            if rho > 0 and args.fine_tune_epochs:
                ft_cfg = OptimizerConfig(rule=config.rule, eta=config.eta / 10,
                                         batch=config.batch,
                                         epochs=args.fine_tune_epochs,
                                         seed=args.seed)
                fine_tune(s, m, train, noise, ft_cfg, masks_d, masks_s,
                          args.fine_tune_epochs)
            apply_quantization(s.params, b, masks_d)
            apply_quantization(m.params, b, masks_s)
            _, acc, _ = evaluate(s, m, *val, len(MODS), noise,
                                 stream(args.seed, "sweep/eval"))
            gamma = net_compression_ratio(weight_matrix_sizes(s.params), spec, b)
            meas = serialized_sizes(s.params, masks_d, b)
            flops = flops_report(s.config, m.config, spec)
            print(f"{rho:5.2f} {b:4d} {acc:8.4f} {gamma:9.2f} "
                  f"{meas['code_bytes'] + meas['overhead_bytes']:9d} "
                  f"{flops.c_ssc / 1e6:13.2f}")


if __name__ == "__main__":
    main()
