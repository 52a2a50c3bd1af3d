"""Command-line entry point.

Subcommands cover the whole workflow: `synth` writes a toy raw TSV,
`prepare` turns a raw TSV into a binary cache, `train` fits the joint
model, `eval` scores a checkpoint, `zeroshot` scores it on an unseen
grid, `ablate` trains a variant with one pathway switched off, and
`dump` exports learned structures (attention, features, adjacency,
bias) as CSV.  Every command writes its artifacts under --out, prints
the main file paths on stdout, and reports failures as one line on
stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import report
from .checkpoint import save_model
from .config import config_hash, load_config, to_text
from .dataset import (CHANNEL_NAMES, gen_mask, load_cache, prepare_dataset,
                      save_cache, window_starts)
from .model import TrafficModel, model_from_checkpoint
from .synthetic import write_synthetic_tsv
from .tensor import no_grad
from .trainer import ablate_tag, evaluate, fit, zero_shot

DUMP_KINDS = ("attention", "features", "adjacency", "bias")


class _Parser(argparse.ArgumentParser):
    """Argparse that fails with a single machine-parsable stderr line."""

    def error(self, message):
        self.exit(2, f"gridcast: error: {message}\n")


def _channel_names(n_channels: int):
    return CHANNEL_NAMES if n_channels == len(CHANNEL_NAMES) else None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_model(cfg, dataset) -> TrafficModel:
    model_cfg = cfg.model_config(dataset.n_nodes, dataset.n_channels)
    return TrafficModel(model_cfg, seed=cfg.model_seed)


def _load_ckpt(path, dataset) -> TrafficModel:
    """Rebuild the checkpointed model and check it fits the cache."""
    model = model_from_checkpoint(path)
    c = model.config
    if (c.n_nodes, c.n_channels) != (dataset.n_nodes, dataset.n_channels):
        raise ValueError(
            f"checkpoint was trained on {c.n_nodes} nodes x "
            f"{c.n_channels} channels but the cache has "
            f"{dataset.n_nodes} x {dataset.n_channels}")
    return model


def _write_config(cfg, out: Path) -> None:
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(to_text(cfg))


def _metric_files(out: Path, tag: str, rep, names) -> None:
    report.write_metrics_csv(out / f"metrics_{tag}.csv", rep, names)
    report.plot_metric_bars(out / f"metrics_{tag}.png", rep, names)
    print(out / f"metrics_{tag}.csv")


def _summary(out: Path, cfg, extra: dict) -> None:
    base = {"config_hash": config_hash(cfg)}
    base.update(extra)
    report.write_summary(out / "summary.txt", base)
    print(out / "summary.txt")


# ---- commands -------------------------------------------------------------


def cmd_synth(args) -> int:
    rows = write_synthetic_tsv(
        args.out, grid_width=args.grid_width, grid_height=args.grid_height,
        n_channels=args.channels, n_days=args.days,
        steps_per_day=args.steps_per_day, seed=args.seed)
    print(f"{args.out}: {rows} rows")
    return 0


def cmd_prepare(args) -> int:
    columns = {"square_id": 0, "timestamp_ms": 1,
               "channels": tuple(range(3, 3 + args.channels))}
    dataset = prepare_dataset(args.input, grid_width=args.grid_width,
                              n_clusters=args.clusters, seed=args.seed,
                              columns=columns, step_ms=args.step_ms)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(out, dataset)
    print(f"{out}: {dataset.n_steps} steps x {dataset.n_nodes} nodes x "
          f"{dataset.n_channels} channels "
          f"(train {dataset.train_end}, val {dataset.val_end - dataset.train_end}, "
          f"test {dataset.n_steps - dataset.val_end})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    dataset = load_cache(args.data)
    model = _build_model(cfg, dataset)
    model.fit_adjacency(dataset)
    ablate = ablate_tag(args.which) if getattr(args, "which", None) else frozenset()

    state = fit(model, dataset, cfg.train_config(), ablate=ablate,
                log=print if args.verbose else None)
    save_model(out / "model.ckpt", model)
    _write_config(cfg, out)
    report.write_steps_csv(out / "train_steps.csv", state.step_rows)
    report.write_epochs_csv(out / "train_epochs.csv", state.epoch_rows)
    report.plot_loss_curve(out / "loss_curve.png", state.step_rows,
                           state.epoch_rows)
    print(out / "model.ckpt")
    print(out / "train_steps.csv")

    names = _channel_names(dataset.n_channels)
    wall = {"train": state.wall_time_s}
    for task in ("predict", "impute"):
        rep = evaluate(model, dataset, "test", task,
                       batch_size=cfg.eval_batch_size, seed=cfg.eval_seed,
                       ablate=ablate, mask_low=cfg.eval_mask_low,
                       mask_high=cfg.eval_mask_high)
        tag = task if not ablate else f"{task}_wo_{args.which.lower()}"
        _metric_files(out, tag, rep, names)
        wall[task] = rep.wall_time_s

    counts = model.parameter_counts()
    _summary(out, cfg, {
        "seed": cfg.train_config().seed,
        "steps_run": state.steps_run,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "stopped_early": state.stopped_early,
        "ablation": args.which.lower() if getattr(args, "which", None) else "none",
        "params": counts,
        "wall_time_s": wall})
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    dataset = load_cache(args.data)
    model = _load_ckpt(args.ckpt, dataset)
    rep = evaluate(model, dataset, args.split, args.task,
                   batch_size=cfg.eval_batch_size, seed=cfg.eval_seed,
                   mask_low=cfg.eval_mask_low, mask_high=cfg.eval_mask_high)
    _metric_files(out, f"{args.task}_{args.split}", rep,
                  _channel_names(dataset.n_channels))
    _summary(out, cfg, {"task": args.task, "split": args.split,
                        "ckpt": str(args.ckpt),
                        "macro_mae": rep.macro_mae,
                        "macro_rmse": rep.macro_rmse,
                        "n_windows": rep.n_windows,
                        "wall_time_s": rep.wall_time_s})
    return 0


def cmd_zeroshot(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    target = load_cache(args.target_data)
    model = _load_ckpt(args.source_ckpt, target)
    rep = zero_shot(model, target, task=args.task,
                    reuse_adjacency=cfg.zeroshot_reuse_adjacency,
                    batch_size=cfg.eval_batch_size, seed=cfg.eval_seed)
    _metric_files(out, f"zeroshot_{args.task}", rep,
                  _channel_names(target.n_channels))
    _summary(out, cfg, {"task": args.task,
                        "source_ckpt": str(args.source_ckpt),
                        "reused_adjacency": cfg.zeroshot_reuse_adjacency,
                        "macro_mae": rep.macro_mae,
                        "macro_rmse": rep.macro_rmse,
                        "n_windows": rep.n_windows})
    return 0


def cmd_ablate(args) -> int:
    ablate_tag(args.which)  # validate before any heavy work
    return cmd_train(args)


def _dump_windows(cfg, dataset, model, k: int):
    """Deterministic sample of test windows (falls back to val, then train)."""
    for split in ("test", "val", "train"):
        starts = window_starts(dataset, split, model.config.context_len,
                               model.config.horizon, 1)
        if len(starts) > 0:
            break
    if len(starts) == 0:
        raise ValueError("no complete windows available to sample")
    rng = np.random.default_rng([cfg.eval_seed, 31337])
    picked = rng.choice(len(starts), size=min(k, len(starts)), replace=False)
    return starts[np.sort(picked)]


def _hour_of_week(steps: np.ndarray, intervals_per_day: int) -> np.ndarray:
    return (steps * 24 // intervals_per_day) % (24 * 7)


def cmd_dump(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    dataset = load_cache(args.data)
    model = _load_ckpt(args.ckpt, dataset)

    if args.what == "adjacency":
        matrix = model.bias_gen.adjacency.data
        report.write_matrix_csv(out / "adjacency.csv", matrix, "node")
        report.plot_heatmap(out / "adjacency.png", matrix,
                            "functional adjacency", "node", "node")
        print(out / "adjacency.csv")
        return 0

    starts = _dump_windows(cfg, dataset, model, args.sample)
    ctx = model.config.context_len
    x = np.stack([dataset.values[s:s + ctx] for s in starts])
    capture = {}
    with no_grad():
        if args.task == "impute":
            mask, _ = gen_mask(x.shape, cfg.eval_mask_low, cfg.eval_mask_high,
                               np.random.default_rng([cfg.eval_seed, 99]))
            model.forward(x, starts, "impute", mask=mask, capture=capture)
        else:
            model.forward(x, starts, "predict", capture=capture)

    if args.what == "attention":
        for layer, weights in enumerate(capture["attention"]):
            mean_attn = weights.mean(axis=(0, 1))      # heads and windows
            path = out / f"attention_l{layer}.csv"
            report.write_matrix_csv(path, mean_attn, "t")
            print(path)
        report.plot_heatmap(out / "attention_l0.png",
                            capture["attention"][0].mean(axis=(0, 1)),
                            "layer 0 mean attention", "key step", "query step")
    elif args.what == "bias":
        mean_bias = capture["bias"].mean(axis=0)
        report.write_matrix_csv(out / "bias.csv", mean_bias, "t")
        report.plot_heatmap(out / "bias.png", mean_bias,
                            "mean attention bias", "step", "step")
        print(out / "bias.csv")
    elif args.what == "features":
        hidden = capture["first_block_hidden"]          # [B, L, d]
        b, length, width = hidden.shape
        flat = hidden.reshape(b * length, width)
        steps = (starts[:, None] + np.arange(length)[None, :]).reshape(-1)
        hours = _hour_of_week(steps, model.config.intervals_per_day)
        rows = [list(flat[i]) + [int(hours[i])] for i in range(len(flat))]
        header = [f"f{j}" for j in range(width)] + ["hour_of_week"]
        report.write_table_csv(out / "features.csv", header, rows)
        print(out / "features.csv")
    else:
        raise ValueError(f"unknown dump kind {args.what!r}")
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gridcast",
                     description="grid traffic forecasting and imputation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None,
                           help="flat key=value config file")
            p.add_argument("--set", action="append", default=[],
                           metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic raw TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-width", type=int, default=4)
    p.add_argument("--grid-height", type=int, default=4)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--steps-per-day", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="raw TSV -> binary cache")
    p.add_argument("--input", required=True)
    p.add_argument("--grid-width", type=int, required=True)
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--channels", type=int, default=5,
                   help="activity channels present in the TSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step-ms", type=int, default=600_000)
    p.add_argument("--out", required=True, help="cache file path")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit the joint model")
    p.add_argument("--data", required=True, help="prepared cache")
    common(p)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train, which=None)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=("predict", "impute"), default="predict")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", help="transfer to an unseen grid")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target-data", required=True)
    p.add_argument("--task", choices=("predict", "impute"), default="predict")
    common(p)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("ablate", help="train with one pathway off")
    p.add_argument("--which", required=True, choices=("ste", "gs", "ge"))
    p.add_argument("--data", required=True)
    common(p)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump", help="export learned structure as CSV")
    p.add_argument("--what", required=True, choices=DUMP_KINDS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("predict", "impute"), default="predict")
    p.add_argument("--sample", type=int, default=8, metavar="K",
                   help="windows to sample for input-dependent dumps")
    common(p)
    p.set_defaults(func=cmd_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line contract for every failure path
        print(f"gridcast: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
