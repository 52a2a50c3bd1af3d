"""Run artifacts: delimited tables, key=value summaries, and figures.

CSV files are the canonical outputs: stable column order, sorted keys,
floats through %.8g, RFC-4180 quoting, LF line endings.  Re-running a
command with the same inputs reproduces them byte for byte.  The PNG
figures rendered next to them are a convenience view of the same numbers
and are not part of that byte-stability contract (the image encoder may
differ across library builds).
"""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .trainer import MetricReport

_FIG_META = {"Software": "gridcast"}  # keep PNG text chunks input-independent


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".8g")
    return str(value)


def channel_labels(n_channels: int, names=None) -> list:
    if names is not None:
        if len(names) != n_channels:
            raise ValueError(f"{len(names)} names for {n_channels} channels")
        return list(names)
    return [f"ch{i}" for i in range(n_channels)]


def write_table_csv(path, header, rows) -> None:
    """Generic one-header-row CSV with canonical number formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])


_write_rows = write_table_csv


def write_metrics_csv(path, report: MetricReport, names=None) -> None:
    """One row per channel per metric, normalized and raw scales, then
    macro rows."""
    labels = channel_labels(len(report.mae), names)
    rows = []
    per_scale = (("normalized", report.mae, report.rmse),
                 ("raw", report.mae_raw, report.rmse_raw))
    for scale, mae, rmse in per_scale:
        for c, label in enumerate(labels):
            rows.append([report.task, report.split, scale, label, "mae",
                         mae[c], int(report.counts[c])])
            rows.append([report.task, report.split, scale, label, "rmse",
                         rmse[c], int(report.counts[c])])
    rows.append([report.task, report.split, "normalized", "macro", "mae",
                 report.macro_mae, int(report.counts.sum())])
    rows.append([report.task, report.split, "normalized", "macro", "rmse",
                 report.macro_rmse, int(report.counts.sum())])
    _write_rows(path, ["task", "split", "scale", "channel", "metric",
                       "value", "count"], rows)


def write_steps_csv(path, step_rows) -> None:
    _write_rows(path, ["step", "epoch", "lr", "loss", "loss_pred", "loss_imp"],
                [[r["step"], r["epoch"], r["lr"], r["loss"], r["loss_pred"],
                  r["loss_imp"]] for r in step_rows])


def write_epochs_csv(path, epoch_rows) -> None:
    _write_rows(path, ["epoch", "steps", "val_loss", "val_pred", "val_imp"],
                [[r["epoch"], r["steps"], r["val_loss"], r["val_pred"],
                  r["val_imp"]] for r in epoch_rows])


def write_ablation_csv(path, rows) -> None:
    _write_rows(path, ["variant", "seed", "mae", "rmse", "steps", "best_val"],
                [[r["variant"], r["seed"], r["mae"], r["rmse"], r["steps"],
                  r["best_val"]] for r in rows])


def write_matrix_csv(path, matrix: np.ndarray, col_prefix: str = "c") -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"need a 2-d matrix, got shape {matrix.shape}")
    header = [f"{col_prefix}{j}" for j in range(matrix.shape[1])]
    _write_rows(path, header, matrix.tolist())


def write_summary(path, mapping: dict) -> None:
    """Sorted key=value lines; nested dicts flatten with dotted keys."""
    flat = {}
    for key, value in mapping.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    lines = [f"{key} = {_fmt(flat[key])}" for key in sorted(flat)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---- figures --------------------------------------------------------------


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_FIG_META)
    plt.close(fig)


def plot_loss_curve(path, step_rows, epoch_rows=()) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in step_rows]
    ax.plot(steps, [r["loss"] for r in step_rows], label="train joint",
            color="tab:blue", linewidth=1.0)
    ax.plot(steps, [r["loss_pred"] for r in step_rows], label="forecast",
            color="tab:green", linewidth=0.8, alpha=0.7)
    ax.plot(steps, [r["loss_imp"] for r in step_rows], label="reconstruct",
            color="tab:orange", linewidth=0.8, alpha=0.7)
    if epoch_rows:
        ax.plot([r["steps"] for r in epoch_rows],
                [r["val_loss"] for r in epoch_rows],
                label="validation", color="tab:red", marker="o",
                linestyle="--", linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_metric_bars(path, report: MetricReport, names=None) -> None:
    labels = channel_labels(len(report.mae), names)
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(x - 0.2, report.mae, width=0.4, label="MAE", color="tab:blue")
    ax.bar(x + 0.2, report.rmse, width=0.4, label="RMSE", color="tab:orange")
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel(f"{report.task} error, normalized scale")
    ax.set_title(f"{report.split} split")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_heatmap(path, matrix: np.ndarray, title: str = "",
                 xlabel: str = "", ylabel: str = "") -> None:
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    image = ax.imshow(matrix, aspect="auto", cmap="viridis",
                      interpolation="nearest")
    fig.colorbar(image, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title)
    if xlabel:
        ax.set_xlabel(xlabel)
    if ylabel:
        ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
