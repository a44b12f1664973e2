"""Delimited outputs and the matplotlib figures rendered next to them.

Every figure is written as SVG together with the CSV holding the plotted
numbers, so the plot can be regenerated by other tooling.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp so identical runs give identical files
SVG_RC = {"svg.hashsalt": "pcg-hinf", "svg.fonttype": "none", "font.size": 9,
          "axes.spines.top": False, "axes.spines.right": False}
SVG_METADATA = {"Date": None, "Creator": None}


def write_csv(path, rows, columns, header: bool = True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns] if isinstance(r, dict) else [_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def plot_curves(out_dir, stem, rows, x, series, ylabel, title):
    """Line plot of ``series`` columns against ``x``; writes <stem>.svg and <stem>.csv."""
    out_dir = Path(out_dir)
    write_csv(out_dir / f"{stem}.csv", rows, [x, *series])
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        xs = [r[x] for r in rows]
        for col in series:
            ax.plot(xs, [r[col] for r in rows], label=col.replace("_", " "), lw=1.4)
        ax.set_xlabel(x)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, out_dir / f"{stem}.svg")
    return out_dir / f"{stem}.svg"


def learning_curves(out_dir, rows) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        plot_curves(out_dir, "loss_curve", rows, "epoch", ["train_loss", "val_loss"], "loss", "Loss"),
        plot_curves(out_dir, "accuracy_curve", rows, "epoch", ["train_acc", "val_acc", "val_f1"],
                    "score", "Accuracy"),
        plot_curves(out_dir, "threshold_curve", rows, "epoch", ["tau"], "threshold", "Decision threshold"),
    ]


def preprocessing_figure(path, raw, denoised, filtered, seconds: float = 3.0):
    """Raw / wavelet-denoised / low-passed waveforms stacked over the first few seconds."""
    n = min(len(raw), int(seconds * raw.sample_rate_hz))
    t = [i / raw.sample_rate_hz for i in range(n)]
    with matplotlib.rc_context(SVG_RC):
        fig, axes = plt.subplots(3, 1, figsize=(6.0, 4.5), sharex=True)
        for ax, w, label in zip(axes, (raw, denoised, filtered), ("raw", "wavelet", "wavelet + IIR")):
            ax.plot(t, w.samples[:n], lw=0.6)
            ax.set_ylabel(label)
        axes[-1].set_xlabel("time (s)")
        fig.tight_layout()
        _save(fig, path)


def spectrum_figure(path, raw_spec, filtered_spec):
    with matplotlib.rc_context(SVG_RC):
        fig, axes = plt.subplots(1, 2, figsize=(6.5, 2.8), sharey=True)
        for ax, (f, m), label in zip(axes, (raw_spec, filtered_spec), ("input", "filtered")):
            ax.plot(f, m, lw=0.6)
            ax.set_title(label)
            ax.set_xlabel("frequency (Hz)")
        axes[0].set_ylabel("|X(f)|")
        fig.tight_layout()
        _save(fig, path)
