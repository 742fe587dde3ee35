"""Training report: a delimited per-step table plus loss and margin figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("loss_total", "loss_global", "loss_fgv", "loss_fgt", "loss_cmr", "loss_tic")

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}


def load_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def smooth(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_table(metrics: Sequence[dict], path, delimiter: str = ",") -> Path:
    path = Path(path)
    n_tau = max((len(m["tau"]) for m in metrics), default=0)
    header = ["step", "lr", *LOSS_KEYS, *[f"tau_{k}" for k in range(n_tau)], "worker_hash"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for m in metrics:
            row = [m["step"], repr(m["lr"])]
            row += ["" if m[k] is None else repr(m[k]) for k in LOSS_KEYS]
            row += [repr(t) for t in m["tau"]] + [""] * (n_tau - len(m["tau"]))
            row.append(m["worker_hash"])
            w.writerow(row)
    return path


def plot_losses(metrics: Sequence[dict], path, window: int = 10) -> Path:
    steps = [m["step"] for m in metrics]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for key in LOSS_KEYS:
            vals = [m[key] for m in metrics]
            if any(v is None for v in vals):
                continue
            ax.plot(steps, smooth(vals, window), label=key.replace("loss_", ""), lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(f"loss ({window}-step mean)")
        ax.legend(frameon=False, ncol=3)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_margins(metrics: Sequence[dict], path) -> Path:
    steps = [m["step"] for m in metrics]
    tau = np.array([m["tau"] for m in metrics])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        cmap = plt.get_cmap("viridis", max(tau.shape[1], 1))
        for k in range(tau.shape[1]):
            ax.plot(steps, tau[:, k], color=cmap(k), lw=0.9, label=f"slot {k}")
        ax.set_xlabel("step")
        ax.set_ylabel("margin")
        ax.legend(frameon=False, ncol=5, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def render_report(metrics_path, out_dir, delimiter: str = ",") -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = load_metrics(metrics_path)
    if not metrics:
        raise ValueError(f"no records in {metrics_path}")
    ext = "tsv" if delimiter == "\t" else "csv"
    return {
        "table": str(write_table(metrics, out / f"metrics.{ext}", delimiter)),
        "losses": str(plot_losses(metrics, out / "losses.png")),
        "margins": str(plot_margins(metrics, out / "margins.png")),
    }
