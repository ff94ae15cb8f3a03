"""Figure rendering for the report path.

Every figure is written as a PNG next to the table files: one accuracy bar
chart per dataset, and one loss/weight curve sheet per dataset built from the
streamed per-run metrics CSVs when they are present.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .harness import display_name, run_name

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
})

_CURVE_FIELDS = ("task_loss", "disc_loss", "adv_loss", "pseudo_loss")


def _safe(name):
    return "".join(c if c.isalnum() or c in ".=-" else "_" for c in name)


def save_accuracy_chart(table, dataset, path):
    """Horizontal bar chart of seed-mean test accuracy, one bar per method."""
    methods = [m for m in table.methods() if table.mean(m, dataset) is not None]
    if not methods:
        return None
    means = [table.mean(m, dataset) for m in methods]
    stds = [table.std(m, dataset) for m in methods]
    fig, ax = plt.subplots(figsize=(6.4, 0.42 * len(methods) + 1.2))
    y = np.arange(len(methods))[::-1]
    ax.barh(y, means, xerr=stds, color="#4878b0", height=0.62, capsize=3)
    ax.set_yticks(y, [display_name(m) for m in methods])
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("target test accuracy")
    ax.set_title(dataset)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _read_run_csv(path):
    cols = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for key, value in row.items():
                cols.setdefault(key, []).append(float(value) if value else np.nan)
    return {k: np.array(v) for k, v in cols.items()}


def save_metric_curves(dataset, runs, path):
    """Loss curves plus schedule/weight traces for a handful of runs."""
    fig, (ax_loss, ax_aux) = plt.subplots(1, 2, figsize=(9.6, 3.4))
    drew = False
    for label, cols in runs:
        steps = cols["step"]
        for fieldname in _CURVE_FIELDS:
            vals = cols.get(fieldname)
            if vals is None or np.isnan(vals).all():
                continue
            ax_loss.plot(steps, vals, lw=0.9,
                         label=f"{label}: {fieldname.replace('_', ' ')}")
            drew = True
        if "mean_weight" in cols and not np.isnan(cols["mean_weight"]).all():
            ax_aux.plot(steps, cols["mean_weight"], lw=0.9, label=f"{label}: mean weight")
        if "lambda" in cols:
            ax_aux.plot(steps, cols["lambda"], lw=0.9, ls="--", label=f"{label}: lambda")
    if not drew:
        plt.close(fig)
        return None
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=7)
    ax_aux.set_xlabel("step")
    ax_aux.set_ylim(-0.05, 1.05)
    ax_aux.legend(fontsize=7)
    fig.suptitle(dataset)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_figures(table, results, out_dir):
    """Write all report figures; returns the created paths."""
    out_dir = Path(out_dir)
    created = []
    for dataset in table.datasets():
        chart = save_accuracy_chart(table, dataset, out_dir / f"accuracy_{_safe(dataset)}.png")
        if chart:
            created.append(chart)
        runs = []
        for method in ("dann", "pseudo-domain"):
            cells = [r for r in results
                     if r.method == method and r.dataset == dataset and r.error is None]
            if not cells:
                continue
            seed = min(c.seed for c in cells)
            csv_path = out_dir / "runs" / f"{run_name(method, dataset, seed)}.csv"
            if csv_path.exists():
                runs.append((display_name(method), _read_run_csv(csv_path)))
        if runs:
            curves = save_metric_curves(dataset, runs,
                                        out_dir / f"curves_{_safe(dataset)}.png")
            if curves:
                created.append(curves)
    return created
