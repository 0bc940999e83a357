"""Report figures: training curves, search progress, confusion matrices and CAM overlays."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

CAM_ALPHA = 0.4
CAM_RAMP = LinearSegmentedColormap.from_list("blue_red", ["#0000ff", "#ff0000"], N=256)

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(ncols=1, width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height))
    return fig, np.atleast_1d(axes)


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(report, path):
    epochs = np.arange(1, len(report.train_loss) + 1)
    fig, (ax_loss, ax_acc) = _figure(ncols=2)
    ax_loss.plot(epochs, report.train_loss, marker="o", ms=3, color="k")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, report.train_accuracy, marker="o", ms=3, label="train")
    ax_acc.plot(epochs, report.val_accuracy, marker="s", ms=3, label="validation")
    if report.best_epoch:
        ax_acc.axvline(report.best_epoch, color="0.6", ls="--", lw=0.8)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def hpo_progress(history, path):
    ok = [r for r in history if r.status == "ok"]
    fig, (ax,) = _figure()
    trials = [r.trial for r in ok]
    values = [r.objective for r in ok]
    ax.scatter(trials, values, s=12, color="0.5", label="trial")
    if values:
        ax.step(trials, np.maximum.accumulate(values), where="post", color="C3", label="best so far")
    failed = [r.trial for r in history if r.status != "ok"]
    for t in failed:
        ax.axvline(t, color="C1", lw=0.6, alpha=0.6)
    ax.set_xlabel("trial")
    ax.set_ylabel("validation accuracy")
    ax.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def confusion_figure(report, path):
    m = np.array([[report.tn, report.fp], [report.fn, report.tp]])
    fig, (ax,) = _figure(width=3.2, height=3.0)
    ax.imshow(m, cmap="Blues")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, str(v), ha="center", va="center", color="k" if v < m.max() / 2 else "w")
    ax.set_xticks([0, 1], ["not_covid", "covid"])
    ax.set_yticks([0, 1], ["not_covid", "covid"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    return _save(fig, path)


def cam_overlay(heat, gray, alpha=CAM_ALPHA):
    """Blend the colour-ramped normalized map over the gray image; returns (H, W, 3) in [0, 1]."""
    gray = np.clip(np.asarray(gray, dtype=np.float64), 0, 1)
    base = np.repeat(gray[..., None], 3, axis=2)
    color = CAM_RAMP(np.clip(heat, 0, 1))[..., :3]
    return (1 - alpha) * base + alpha * color


def save_cam_overlay(heat, gray, path, alpha=CAM_ALPHA):
    """Write the overlay as a PNG with exactly the input's pixel extent."""
    plt.imsave(path, cam_overlay(heat, gray, alpha))
    return path
