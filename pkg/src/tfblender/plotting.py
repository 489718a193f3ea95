"""Figures for the report paths: loss curves and trade-off sweeps.

Everything renders through the non-interactive Agg backend to self-contained
SVG.  The hash salt and date metadata are pinned so identical data gives a
byte-identical file.
"""

import contextlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "tfblender",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}

METHOD_LABELS = {
    "passthrough": "observed",
    "uniform": "uniform average",
    "cosine": "cosine softmax",
    "tfblender": "adaptive blend",
}


@contextlib.contextmanager
def report_style():
    with plt.rc_context(STYLE):
        yield


def save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_loss_curve(rows, path, title="training"):
    """``rows`` are ``(step, train_mse, eval_mse_or_None)`` tuples."""
    with report_style():
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        steps = [r[0] for r in rows]
        ax.plot(steps, [r[1] for r in rows], label="train")
        evals = [(r[0], r[2]) for r in rows if r[2] is not None]
        if evals:
            ax.plot(*zip(*evals), marker="o", label="eval")
        ax.set_xlabel("step")
        ax.set_ylabel("reconstruction MSE")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        save(fig, path)


def plot_tradeoff(records, path):
    """Cost ratio and per-method MSE against the number of aggregated frames."""
    counts = [r.neighbor_count for r in records]
    with report_style():
        fig, (ax_r, ax_m) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        ax_r.plot(counts, [r.measured_r for r in records], marker="o", label="measured")
        ax_r.plot(counts, [r.predicted_r for r in records], marker="s", ls="--",
                  label="predicted (linear cost model)")
        ax_r.set_xlabel("aggregated frames i")
        ax_r.set_ylabel("cost ratio r")
        ax_r.legend(frameon=False)
        for key in METHOD_LABELS:
            ax_m.plot(counts, [getattr(r, f"mse_{key}") for r in records], marker="o",
                      label=METHOD_LABELS[key])
        ax_m.set_xlabel("aggregated frames i")
        ax_m.set_ylabel("eval MSE")
        ax_m.legend(frameon=False)
        fig.tight_layout()
        save(fig, path)
