"""Command-line surface.

Subcommands: synth, tiles, train, eval, sweep-c, route-stats, saliency,
kernel-bench.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import ssm as ssm_mod
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, load_run_config
from .data import (
    FormatError,
    ManifestEntry,
    kfold_split,
    load_bag,
    load_split_bags,
    read_manifest,
    save_bag,
    synth_bags,
    write_manifest,
)
from .metrics import MetricError, evaluate_bags
from .model import BagFeatures, forward_bag, init_model, saliency
from .moe import load_balance_stats
from .train import TrainConfig, train_loop


def _infer_data_shape(entries, base_dir):
    """(feature width, class count) implied by the manifest's bags."""
    first = load_bag(
        entries[0].path
        if os.path.isabs(entries[0].path)
        else os.path.join(base_dir, entries[0].path)
    )
    max_label = max(e.label for e in entries)
    return first.features.shape[1], max_label + 1


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    bags, truth = synth_bags(args.bags, args.bag_size, args.dim,
                             args.witness_rate, args.sep, args.depth, args.seed)
    folds = kfold_split([b.label for b in bags], folds=5, seed=args.seed)
    entries = []
    for bag, fold in zip(bags, folds):
        fname = f"{bag.bag_id}.fbag"
        save_bag(os.path.join(args.out, fname), bag)
        entries.append(ManifestEntry(path=fname, label=bag.label, split=f"fold{fold}"))
    write_manifest(os.path.join(args.out, "manifest.tsv"), entries)
    with open(os.path.join(args.out, "witness_masks.tsv"), "w", encoding="utf-8") as fh:
        fh.write("bag_id\twitness_indices\n")
        for bag, mask in zip(bags, truth.witness_masks):
            idx = ",".join(str(i) for i in np.nonzero(mask)[0])
            fh.write(f"{bag.bag_id}\t{idx}\n")
    print(f"wrote {len(bags)} bags to {args.out} (manifest.tsv, witness_masks.tsv)")
    return 0


def cmd_tiles(args) -> int:
    from PIL import Image

    from .tiles import process_image

    img = np.asarray(Image.open(args.input).convert("RGB"))
    reports, kept, threshold = process_image(img)
    os.makedirs(args.out, exist_ok=True)
    for (row, col), patch in kept.items():
        Image.fromarray(patch).save(os.path.join(args.out, f"tile_r{row}_c{col}.png"))
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write("row\tcol\tverdict\treject_reason\toccupancy\tmean_std\tzero_fraction\n")
        for r in reports:
            fh.write(f"{r.row}\t{r.col}\t{r.verdict}\t{r.reject_reason or '-'}\t"
                     f"{r.occupancy:.6f}\t{r.mean_std:.6f}\t{r.zero_fraction:.6f}\n")
    print(f"otsu threshold {threshold}; kept {len(kept)}/{len(reports)} tiles")
    return 0


def _train_setup(args):
    model_cfg, train_cfg = load_run_config(args.config)
    entries = read_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    d_in, n_classes = _infer_data_shape(entries, base_dir)
    model_cfg = dataclasses.replace(
        model_cfg, d_in=d_in, n_classes=max(model_cfg.n_classes, n_classes)
    )
    if args.seed is not None:
        model_cfg = dataclasses.replace(model_cfg, seed=args.seed)
    return model_cfg, train_cfg, entries, base_dir


def cmd_train(args) -> int:
    model_cfg, train_cfg, _, _ = _train_setup(args)
    train_loop(args.manifest, model_cfg, train_cfg, model_cfg.seed,
               args.out, args.log)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = checkpoint_load(args.ckpt)
    entries = read_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    bags, labels = load_split_bags(entries, args.split, base_dir)
    report = evaluate_bags(params, bags, labels, fold=args.split)
    text = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_sweep_c(args) -> int:
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one curvature")
    model_cfg, train_cfg, entries, base_dir = _train_setup(args)
    if args.train_split:
        train_cfg = dataclasses.replace(train_cfg, train_split=args.train_split)
    workdir = args.workdir or f"{args.out}.points"
    os.makedirs(workdir, exist_ok=True)
    rows = []
    for c in values:
        cfg_c = dataclasses.replace(model_cfg, curvature=c)
        ckpt = os.path.join(workdir, f"c{c:g}.ckpt")
        log = os.path.join(workdir, f"c{c:g}.log.tsv")
        params = train_loop(args.manifest, cfg_c, train_cfg, cfg_c.seed, ckpt, log)
        bags, labels = load_split_bags(entries, args.eval_split, base_dir)
        report = evaluate_bags(params, bags, labels, fold=args.eval_split)
        with open(os.path.join(workdir, f"c{c:g}.report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        with open(log, "r", encoding="utf-8") as fh:
            final_loss = float(fh.readlines()[-1].split("\t")[2])
        rows.append((c, report.auroc, report.accuracy, report.f1_macro, final_loss))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("curvature\tauroc\taccuracy\tf1_macro\tfinal_train_loss\n")
        for c, au, acc, f1, loss in rows:
            fh.write(f"{c:g}\t{au:.4f}\t{acc:.4f}\t{f1:.4f}\t{loss:.6f}\n")
    print(f"sweep table written to {args.out} ({len(rows)} rows)")
    return 0


def cmd_route_stats(args) -> int:
    params = checkpoint_load(args.ckpt)
    entries = read_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    bags, labels = load_split_bags(entries, args.split, base_dir)
    k = params.config.k_experts

    records = []
    token_lines = []
    for bag in bags:
        _, recs, _ = forward_bag(params, bag, mode="eval")
        records.extend(recs)
        if args.tokens_out:
            token_lines.append(f"# bag {bag.bag_id}")
            for rec in recs:
                ids = ",".join(str(int(i)) for i in rec.expert_ids)
                ws = ",".join(f"{w:.6f}" for w in rec.weights)
                ps = ",".join(f"{p:.6f}" for p in rec.probs)
                token_lines.append(f"{rec.token_index}\t{ids}\t{ws}\t{ps}")
    fraction, importance = load_balance_stats(records, k)

    mean_weight = np.zeros(k)
    counts = np.zeros(k)
    for rec in records:
        mean_weight[rec.expert_ids] += rec.weights
        counts[rec.expert_ids] += 1.0
    mean_weight = np.divide(mean_weight, counts, out=np.zeros(k), where=counts > 0)

    print("expert\tfraction\timportance\tmean_renorm_weight\tauroc\taccuracy\tf1_macro")
    for e in range(k):
        rep = evaluate_bags(params, bags, labels, force_expert=e)
        print(f"{e}\t{fraction[e]:.4f}\t{importance[e]:.4f}\t{mean_weight[e]:.4f}\t"
              f"{rep.auroc:.4f}\t{rep.accuracy:.4f}\t{rep.f1_macro:.4f}")
    if args.tokens_out:
        with open(args.tokens_out, "w", encoding="utf-8") as fh:
            fh.write("token_index\texpert_ids\tweights\tprobs\n")
            fh.write("\n".join(token_lines) + "\n")
        print(f"per-token table written to {args.tokens_out}")
    return 0


def cmd_saliency(args) -> int:
    params = checkpoint_load(args.ckpt)
    bag = load_bag(args.bag)
    scores = saliency(params, bag)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("instance\tscore\n")
        for i, s in enumerate(scores):
            fh.write(f"{i}\t{s:.8f}\n")
    print(f"saliency for {bag.bag_id} written to {args.out}")
    return 0


def bench_kernels(lengths, runs: int = 20, n_state: int = 64, seed: int = 0):
    """Median wall times (ms) of the convolution and recurrence paths."""
    layer = ssm_mod.hippo_diag_init(n_state, d_model=1, seed=seed)
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        u = rng.standard_normal((length, 1))
        kernel = ssm_mod.ssm_kernel(layer, length)
        conv_times, scan_times = [], []
        for _ in range(runs):
            t0 = time.perf_counter()
            ssm_mod.conv_apply(u, kernel, layer.skip)
            conv_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            ssm_mod.recurrent_scan(u, layer)
            scan_times.append(time.perf_counter() - t0)
        rows.append((length, float(np.median(conv_times)) * 1e3,
                     float(np.median(scan_times)) * 1e3))
    return rows


def cmd_kernel_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    rows = bench_kernels(lengths, runs=args.runs, n_state=args.n_state)
    print("length\tconv_ms\tscan_ms")
    for length, conv_ms, scan_ms in rows:
        print(f"{length}\t{conv_ms:.3f}\t{scan_ms:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geomil",
        description="Bag-level classification with a state-space + "
                    "mixture-of-experts backbone and a hybrid geometric head.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bag dataset")
    p.add_argument("--bags", type=int, default=200)
    p.add_argument("--bag-size", type=int, default=64)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--witness-rate", type=float, default=0.1)
    p.add_argument("--sep", type=float, default=4.0)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tiles", help="tile, mask and filter a raster image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_tiles)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-c", help="train/eval once per curvature value")
    p.add_argument("--values", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-split", default=None)
    p.add_argument("--eval-split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--workdir", default=None)
    p.set_defaults(func=cmd_sweep_c)

    p = sub.add_parser("route-stats", help="routing diagnostics and per-expert eval")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="")
    p.add_argument("--tokens-out", default=None)
    p.set_defaults(func=cmd_route_stats)

    p = sub.add_parser("saliency", help="per-instance provenance scores for one bag")
    p.add_argument("--bag", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("kernel-bench", help="time the convolution vs recurrence paths")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--n-state", type=int, default=64)
    p.set_defaults(func=cmd_kernel_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 for --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FormatError, MetricError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
