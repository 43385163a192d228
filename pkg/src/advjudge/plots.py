"""ROC and feature-importance figures: SVG for reading, CSV for the raw numbers.

SVG output is made byte-stable (fixed id salt, no date stamp) so reruns of a
pipeline produce identical files.
"""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .transforms import FEATURE_NAMES  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "advjudge", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def write_roc(curves, svg_path, csv_path):
    """``curves`` maps detector name to ``(RocCurve, auc)``."""
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["detector", "fpr", "tpr"])
        for name, (curve, _) in curves.items():
            for x, y in curve.points:
                w.writerow([name, repr(x), repr(y)])
    fig, ax = plt.subplots(figsize=(6, 6))
    for name, (curve, area) in curves.items():
        bold = name == "advjudge"
        ax.plot(curve.fpr, curve.tpr, lw=2.5 if bold else 1.0, label=f"{name} (AUC {area:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, svg_path)


def write_importance(importance, svg_path, csv_path):
    """Bar chart of mean signed attribution per transform for the two verdict groups."""
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["feature", "benign_signed", "adversarial_signed", "benign_abs", "adversarial_abs"])
        for k, name in enumerate(FEATURE_NAMES):
            w.writerow([name, repr(float(importance.benign_signed[k])),
                        repr(float(importance.adversarial_signed[k])),
                        repr(float(importance.benign_abs[k])), repr(float(importance.adversarial_abs[k]))])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=False)
    for ax, values, title in ((axes[0], importance.benign_signed, "judged benign"),
                              (axes[1], importance.adversarial_signed, "judged adversarial")):
        ax.barh(list(FEATURE_NAMES), values, color=["tab:blue" if v >= 0 else "tab:red" for v in values])
        ax.axvline(0, color="black", lw=0.6)
        ax.set_title(title)
        ax.invert_yaxis()
        ax.set_xlabel("mean integrated gradient")
    fig.tight_layout()
    _save(fig, svg_path)
