"""Static figures written next to the CSV outputs of ``eval`` and ``report``."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

BELIEF_COLORS = {"mean_vb": "tab:blue", "mean_cb": "tab:orange", "mean_ib": "tab:red"}
BELIEF_LABELS = {"mean_vb": "vacuous", "mean_cb": "conflicting", "mean_ib": "incorrect"}


def figsize(width: float = 5.0, rows: int = 1) -> tuple[float, float]:
    return width, width * GOLDEN * rows


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _floats(rows: Sequence[Mapping], key: str) -> list[float]:
    out = []
    for r in rows:
        v = r.get(key, "")
        out.append(float(v) if v not in ("", "NA", None) else math.nan)
    return out


def belief_trends(runs: Mapping[str, Sequence[Mapping]], path: Path) -> Path:
    """One panel per run: vacuous / conflicting / incorrect belief per iteration.

    Half the conflicting belief is drawn dashed; it should stay under the
    incorrect-belief curve.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(runs), 1, figsize=figsize(5.0, len(runs)), squeeze=False, sharex=True)
        for ax, (name, rows) in zip(axes[:, 0], runs.items()):
            it = _floats(rows, "iter")
            for key, color in BELIEF_COLORS.items():
                ax.plot(it, _floats(rows, key), color=color, lw=0.8, label=BELIEF_LABELS[key])
            ax.plot(it, [c / 2 for c in _floats(rows, "mean_cb")], color=BELIEF_COLORS["mean_cb"],
                    lw=0.6, ls="--", label="conflicting / 2")
            ax.set_title(name)
            ax.set_ylabel("belief")
            ax.set_ylim(0, 1)
        axes[0, 0].legend(loc="upper right", ncol=2, frameon=False)
        axes[-1, 0].set_xlabel("meta-iteration")
        return _save(fig, path)


def budget_curves(runs: Mapping[str, Sequence[Mapping]], path: Path) -> Path:
    """Training query loss against the number of labeled query sets."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for name, rows in runs.items():
            ax.plot(_floats(rows, "labeled_query_sets"), _floats(rows, "train_loss"), lw=0.8, label=name)
        ax.set_xlabel("labeled query sets")
        ax.set_ylabel("query loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def vacuity_thresholds(runs: Mapping[str, Sequence[Mapping]], path: Path) -> Path:
    """Accuracy and coverage of predictions kept below each vacuity threshold."""
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_cov) = plt.subplots(1, 2, figsize=figsize(6.0))
        for name, rows in runs.items():
            rows = [r for r in rows if r["threshold"] != "overall"]
            thr = _floats(rows, "threshold")
            ax_acc.plot(thr, _floats(rows, "accuracy"), marker="o", ms=3, lw=0.8, label=name)
            ax_cov.plot(thr, _floats(rows, "coverage"), marker="o", ms=3, lw=0.8, label=name)
        ax_acc.set_xlabel("vacuity threshold")
        ax_acc.set_ylabel("accuracy")
        ax_cov.set_xlabel("vacuity threshold")
        ax_cov.set_ylabel("coverage")
        ax_acc.legend(frameon=False)
        return _save(fig, path)


def ood_vacuity(rows: Sequence[Mapping], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.0))
        mags = _floats(rows, "magnitude")
        ax.plot(mags, _floats(rows, "mean_vacuity"), marker="o", ms=3, lw=0.8, color="tab:blue", label="vacuity")
        ax.plot(mags, _floats(rows, "accuracy"), marker="s", ms=3, lw=0.8, color="tab:gray", label="accuracy")
        ax.set_xlabel(f"{rows[0]['kind']} magnitude" if rows else "magnitude")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)
