"""Experiment harness: dataset synthesis, training, evaluation, compression
sweeps and report aggregation from declarative YAML configs.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 transport failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import threading
from pathlib import Path

import numpy as np

from . import compressor, splittrain, transport
from .config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
)
from .mcnet import MCNet
from .numcore.params import restore_into, save_checkpoint
from .rng import stream
from .sigsynth import read_dataset, synthesize_dataset, write_dataset
from .splittrain import LinkNoiseSpec, OptimizerConfig, frames_to_arrays, one_hot
from .sscnet import SSCNet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_TRANSPORT = 4


# ---------------------------------------------------------------------------
# artifact helpers

def _write_csv(path, header, rows, cfg_hash):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def read_artifact_csv(path):
    """Returns (config_hash, header, rows) of a CSV written by this tool."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# config_hash="):
        raise ConfigError(f"{path} carries no config hash")
    cfg_hash = lines[0].split("=", 1)[1]
    reader = list(csv.reader(lines[1:]))
    return cfg_hash, reader[0], reader[1:]


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# data plumbing

def _synth_frames(cfg: ExperimentConfig, snr_db=None, n_per_class=None):
    ds = cfg.dataset
    frames, _ = synthesize_dataset(
        ds.mods, n_per_class or ds.n_per_class, ds.L, sps=ds.sps,
        snr_db=ds.snr_db if snr_db is None else snr_db, seed=ds.seed)
    return frames


def _train_val_arrays(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.path:
        frames, mods = read_dataset(ds.path)
    else:
        frames = _synth_frames(cfg)
        mods = list(ds.mods)
    X, y = frames_to_arrays(frames, mods)
    order = stream(ds.seed, "split/shuffle").permutation(len(X))
    X, y = X[order], y[order]
    n_val = max(1, int(len(X) * ds.val_fraction))
    return (X[n_val:], y[n_val:]), (X[:n_val], y[:n_val]), mods


def _build_nets(cfg: ExperimentConfig, seed=None):
    seed = cfg.optimizer.seed if seed is None else seed
    ssc = SSCNet(cfg.model.ssc(), rng=stream(seed, "weights/ssc"))
    mc = MCNet(cfg.model.mc(), rng=stream(seed, "weights/mc"))
    return ssc, mc


def _load_nets(cfg: ExperimentConfig, ckpt_dir):
    ssc, mc = _build_nets(cfg)
    restore_into(ssc.params, Path(ckpt_dir) / "sscnet.camcw")
    restore_into(mc.params, Path(ckpt_dir) / "mcnet.camcw")
    return ssc, mc


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    frames = _synth_frames(cfg)
    path = out / "dataset.camcds"
    write_dataset(path, frames)
    manifest = {
        "config_hash": config_hash(cfg),
        "n_frames": len(frames),
        "frame_len": cfg.dataset.L,
        "per_class": {m: sum(1 for f in frames if f.label == m)
                      for m in cfg.dataset.mods},
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {path} ({len(frames)} frames)")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    if args.mode == "online":
        return _train_online(cfg, args)
    out = _out_dir(cfg)
    train, val, mods = _train_val_arrays(cfg)
    ssc, mc = _build_nets(cfg)
    report = splittrain.train_offline(
        ssc, mc, train, val, cfg.model.M, cfg.link, cfg.optimizer,
        out_dir=out, patience=args.patience, label_order=mods)
    (out / "run.json").write_text(json.dumps(
        {"config_hash": config_hash(cfg), "config": config_to_dict(cfg),
         "best_epoch": report.best_epoch, "wall_time_s": report.wall_time_s,
         "optimizer_rule": report.optimizer_rule}, indent=2, default=str))
    for line in report.lines():
        print(line)
    if report.aborted:
        print("training aborted: non-finite loss", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


def _train_online(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    try:
        if args.role == "server":
            listener, _ = transport.listen_tcp(args.bind)
            channel = transport.accept_tcp(listener)
            _, mc = _build_nets(cfg)
            transport.run_online_server(channel, mc, cfg.optimizer)
            save_checkpoint(out / "mcnet.camcw", mc.params)
            channel.close()
            listener.close()
            return EXIT_OK

        train, _, mods = _train_val_arrays(cfg)
        X, y = train
        onehot = one_hot(y, cfg.model.M)
        if args.role == "device":
            channel = transport.connect_tcp(args.bind)
            ssc, _ = _build_nets(cfg)
            losses = transport.run_online_device(channel, ssc, X, onehot,
                                                 cfg.link, cfg.optimizer)
            save_checkpoint(out / "sscnet.camcw", ssc.params)
            channel.close()
        else:  # both: loopback server thread + local device
            listener, (host, port) = transport.listen_tcp(args.bind or "127.0.0.1:0")
            ssc, mc = _build_nets(cfg)
            errors = []

            def server():
                try:
                    ch = transport.accept_tcp(listener)
                    transport.run_online_server(ch, mc, cfg.optimizer)
                    ch.close()
                except transport.TransportError as exc:
                    errors.append(exc)
            t = threading.Thread(target=server)
            t.start()
            channel = transport.connect_tcp(f"{host}:{port}")
            losses = transport.run_online_device(channel, ssc, X, onehot,
                                                 cfg.link, cfg.optimizer)
            channel.close()
            t.join()
            listener.close()
            if errors:
                raise errors[0]
            save_checkpoint(out / "sscnet.camcw", ssc.params)
            save_checkpoint(out / "mcnet.camcw", mc.params)
        for i, loss in enumerate(losses):
            print(f"step={i} loss={'skipped' if loss is None else f'{loss:.6f}'}")
        if any(loss is not None and not np.isfinite(loss) for loss in losses):
            return EXIT_DIVERGENCE
    except transport.TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    return EXIT_OK


def _accuracy_at(cfg, ssc, mc, snr_db, mods, n_per_class):
    frames, _ = synthesize_dataset(mods, n_per_class, cfg.dataset.L,
                                   sps=cfg.dataset.sps, snr_db=snr_db,
                                   seed=cfg.dataset.seed + 104729)
    X, y = frames_to_arrays(frames, mods)
    rng = stream(cfg.optimizer.seed, "eval/link", int(round(10 * snr_db)) & 0xFFFF)
    loss, acc, confusion = splittrain.evaluate(ssc, mc, X, y, len(mods),
                                               cfg.link, rng)
    return loss, acc, confusion


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ssc, mc = _load_nets(cfg, args.checkpoint_dir or out)
    mods = list(cfg.dataset.mods)
    cfg_hash = config_hash(cfg)
    rows = []
    confusion = None
    for snr in cfg.eval_snrs_db:
        loss, acc, confusion = _accuracy_at(cfg, ssc, mc, snr, mods,
                                            cfg.dataset.eval_n_per_class)
        rows.append([snr, f"{loss:.6f}", f"{acc:.4f}"])
        print(f"snr_db={snr} loss={loss:.4f} acc={acc:.4f}")
    _write_csv(out / "accuracy_vs_snr.csv", ["snr_db", "loss", "accuracy"],
               rows, cfg_hash)
    conf_rows = [[mods[i]] + [int(c) for c in confusion[i]]
                 for i in range(len(mods))]
    _write_csv(out / "confusion.csv", ["true\\pred"] + mods, conf_rows, cfg_hash)
    return EXIT_OK


def cmd_compress(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ssc, mc = _load_nets(cfg, args.checkpoint_dir or out)
    cc = cfg.compress
    spec = compressor.PruneSpec(dict(cc.prune_ratios), cc.fine_tune_epochs)
    cfg_hash = config_hash(cfg)

    ssc_sizes = compressor.weight_matrix_sizes(ssc.params)
    mc_sizes = compressor.weight_matrix_sizes(mc.params)
    masks_dev, rows_dev = compressor.prune_params(ssc.params, spec)
    masks_srv, rows_srv = compressor.prune_params(mc.params, spec)

    if cc.fine_tune_epochs > 0:
        train, val, mods = _train_val_arrays(cfg)
        tuned = OptimizerConfig(rule=cfg.optimizer.rule, eta=cfg.optimizer.eta,
                                batch=cfg.optimizer.batch,
                                epochs=cc.fine_tune_epochs,
                                seed=cfg.optimizer.seed + 1)
        opt_dev = splittrain.Optimizer(tuned)
        opt_srv = splittrain.Optimizer(tuned)
        shuffle = stream(tuned.seed, "finetune/shuffle")
        drop_dev = stream(tuned.seed, "finetune/dropout/device")
        drop_srv = stream(tuned.seed, "finetune/dropout/server")
        fwd = stream(tuned.seed, "finetune/link/fwd")
        bwd = stream(tuned.seed, "finetune/link/bwd")
        X, y = train
        for _ in range(cc.fine_tune_epochs):
            order = shuffle.permutation(len(X))
            for lo in range(0, len(order), tuned.batch):
                idx = order[lo:lo + tuned.batch]
                res = splittrain.offline_step(
                    ssc, mc, X[idx], one_hot(y[idx], cfg.model.M), cfg.link,
                    opt_dev, opt_srv, fwd, bwd, drop_dev, drop_srv,
                    masks_dev=masks_dev, masks_srv=masks_srv)
                if res.aborted:
                    print("fine-tune diverged", file=sys.stderr)
                    return EXIT_DIVERGENCE

    save_checkpoint(out / "sscnet_pruned.camcw", ssc.params)
    save_checkpoint(out / "mcnet_pruned.camcw", mc.params)
    for net, masks, name in ((ssc, masks_dev, "sscnet"), (mc, masks_srv, "mcnet")):
        layers = {}
        for pname in compressor.prunable_names(net.params):
            codes, qp = compressor.quantize_layer(net.params[pname].data, cc.bits)
            layers[pname] = (codes, qp, masks[pname])
        compressor.save_quantized(out / f"{name}.camcq", layers)

    g_ssc, g_mc, g = compressor.compression_ratio(ssc_sizes, mc_sizes, spec, cc.bits)
    measured = compressor.serialized_sizes(ssc.params, masks_dev, cc.bits)
    flops_kept = compressor.flops_report(cfg.model.ssc(), cfg.model.mc(), spec,
                                         cc.lam, reading="kept")
    flops_lit = compressor.flops_report(cfg.model.ssc(), cfg.model.mc(), spec,
                                        cc.lam, reading="literal")
    rows = [
        ["gamma_ssc_analytic", f"{g_ssc:.4f}"],
        ["gamma_mc_analytic", f"{g_mc:.4f}"],
        ["gamma_overall_analytic", f"{g:.4f}"],
        ["device_dense_bytes", measured["dense_bytes"]],
        ["device_code_bytes", measured["code_bytes"]],
        ["device_overhead_bytes", measured["overhead_bytes"]],
        ["device_measured_ratio_excl_overhead",
         f"{measured['dense_bytes'] / measured['code_bytes']:.4f}"],
        ["device_measured_ratio_incl_overhead",
         f"{measured['dense_bytes'] / (measured['code_bytes'] + measured['overhead_bytes']):.4f}"],
        ["flops_device_kept", f"{flops_kept.c_ssc:.0f}"],
        ["flops_server_kept", f"{flops_kept.c_mc:.0f}"],
        ["flops_effective_kept", f"{flops_kept.effective:.0f}"],
        ["flops_device_literal", f"{flops_lit.c_ssc:.0f}"],
        ["lambda", cc.lam],
        ["bits", cc.bits],
    ]
    rows += [[f"sparsity_{r['layer']}", r["actual_zeros"] / r["n_weights"]]
             for r in rows_dev + rows_srv]
    _write_csv(out / "compression_report.csv", ["metric", "value"], rows,
               config_hash(cfg))
    for metric, value in rows[:8]:
        print(f"{metric}={value}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ssc, mc = _load_nets(cfg, args.checkpoint_dir or out)
    mods = list(cfg.dataset.mods)
    cfg_hash = config_hash(cfg)
    n_eval = cfg.dataset.eval_n_per_class
    if args.kind == "snr":
        link_snrs = [float(s) for s in (args.link_snrs or "0,5,10,20").split(",")]
        rows = []
        for sensing in cfg.eval_snrs_db:
            for link in link_snrs:
                sweep_cfg = config_from_dict({**config_to_dict(cfg),
                                              "link": {"fwd_snr_db": link}})
                _, acc, _ = _accuracy_at(sweep_cfg, ssc, mc, sensing, mods, n_eval)
                rows.append([sensing, link, f"{acc:.4f}"])
        _write_csv(out / "snr_surface.csv",
                   ["sensing_snr_db", "link_snr_db", "accuracy"], rows, cfg_hash)
    else:  # rho sweep: device-only, server-only and joint pruning
        base = (ssc.params.state_arrays(), mc.params.state_arrays())
        ssc_layers = {compressor.layer_of(n) for n in compressor.prunable_names(ssc.params)}
        mc_layers = {compressor.layer_of(n) for n in compressor.prunable_names(mc.params)}
        rhos = [float(r) for r in (args.rhos or "0.1,0.3,0.5,0.7,0.9").split(",")]
        rows = []
        snr = max(cfg.eval_snrs_db)
        for rho in rhos:
            for setting, layers in (("device", ssc_layers), ("server", mc_layers),
                                    ("joint", ssc_layers | mc_layers)):
                ssc.params.load_arrays(base[0])
                mc.params.load_arrays(base[1])
                spec = compressor.PruneSpec.uniform(rho, layers)
                compressor.prune_params(ssc.params, spec)
                compressor.prune_params(mc.params, spec)
                _, acc, _ = _accuracy_at(cfg, ssc, mc, snr, mods, n_eval)
                rows.append([rho, setting, f"{acc:.4f}"])
        ssc.params.load_arrays(base[0])
        mc.params.load_arrays(base[1])
        _write_csv(out / "accuracy_vs_rho.csv",
                   ["rho", "setting", "accuracy"], rows, cfg_hash)
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig | None, args) -> int:
    """Aggregate accuracy CSVs from one or more run dirs into a summary."""
    rows, hashes = [], set()
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "accuracy_vs_snr.csv"
        cfg_hash, header, data = read_artifact_csv(path)
        hashes.add(cfg_hash)
        if len(hashes) > 1:
            print("refusing to aggregate runs with different config hashes",
                  file=sys.stderr)
            return EXIT_CONFIG
        rows += [[run_dir] + r for r in data]
    out = Path(args.out or "report_summary.csv")
    _write_csv(out, ["run_dir", "snr_db", "loss", "accuracy"], rows,
               hashes.pop() if hashes else "none")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through scalar key {part!r}")
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value
    return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camc", description="collaborative modulation-classification workbench")
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="synthesize a labelled dataset")

    p_train = sub.add_parser("train", help="train the encoder/classifier pair")
    p_train.add_argument("--mode", choices=["offline", "online"], default="offline")
    p_train.add_argument("--role", choices=["device", "server", "both"], default="both")
    p_train.add_argument("--bind", default=None,
                         help="host:port for online mode (default $CAMC_BIND)")
    p_train.add_argument("--patience", type=int, default=10)

    p_eval = sub.add_parser("eval", help="accuracy vs SNR and confusion matrix")
    p_eval.add_argument("--checkpoint-dir", default=None)

    p_comp = sub.add_parser("compress", help="prune, fine-tune and quantize")
    p_comp.add_argument("--checkpoint-dir", default=None)

    p_sweep = sub.add_parser("sweep", help="SNR-grid or pruning-ratio sweeps")
    p_sweep.add_argument("--kind", choices=["snr", "rho"], default="snr")
    p_sweep.add_argument("--checkpoint-dir", default=None)
    p_sweep.add_argument("--link-snrs", default=None)
    p_sweep.add_argument("--rhos", default=None)

    p_rep = sub.add_parser("report", help="aggregate run artifacts")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compress": cmd_compress,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            cfg = None
        else:
            if args.config:
                import yaml
                raw = yaml.safe_load(Path(args.config).read_text()) or {}
            else:
                raw = {}
            cfg = config_from_dict(_apply_overrides(raw, args.set))
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except transport.TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
