"""Static SVG figures rendered from stored evaluation JSON and curve CSVs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None}
plt.rcParams["svg.hashsalt"] = "shgnet"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_curves(curves: dict, kind: str, path, title: str = "") -> Path:
    """ROC (``kind="roc"``) or PR curves for every class with a defined curve."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for name, c in curves.items():
        if c is None:
            continue
        cur = c[kind]
        label = f"{name} ({'AUC' if kind == 'roc' else 'AP'}={cur['area']:.3f})"
        if kind == "roc":
            ax.plot(cur["x"], cur["y"], label=label)
        else:
            ax.step(cur["x"], cur["y"], where="post", label=label)
    if kind == "roc":
        ax.plot([0, 1], [0, 1], ls="--", color="grey", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
    else:
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title or kind.upper())
    ax.legend(loc="lower right" if kind == "roc" else "lower left", fontsize=8)
    return _save(fig, path)


def plot_confusion(matrix: Sequence[Sequence[int]], classes: Sequence[str], path,
                   title: str = "confusion matrix") -> Path:
    cm = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4, 3.6))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > cm.max() / 2 else "black")
    ax.set_xticks(range(len(classes)), classes)
    ax.set_yticks(range(len(classes)), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    return _save(fig, path)


def plot_fold_bars(summary: dict, path, metric: str = "accuracy") -> Path:
    vals = summary[metric]["folds"]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar([f"fold {i + 1}" for i in range(len(vals))], vals, color="tab:blue")
    ax.axhline(summary[metric]["mean"], color="tab:red", ls="--", lw=1,
               label=f"mean {summary[metric]['mean']:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_history(csv_path, path) -> Path:
    data = np.genfromtxt(csv_path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(data["epoch"], data["train_loss"], label="train")
    a2.plot(data["epoch"], data["train_acc"], label="train")
    if not np.all(np.isnan(data["val_loss"])):
        a1.plot(data["epoch"], data["val_loss"], label="validation")
        a2.plot(data["epoch"], data["val_acc"], label="validation")
    a1.set_ylabel("loss")
    a2.set_ylabel("accuracy")
    for a in (a1, a2):
        a.set_xlabel("epoch")
        a.legend(fontsize=8)
    return _save(fig, path)


def render_report(in_dir, out_dir: Optional[str] = None) -> list[Path]:
    """Render every figure derivable from the artifacts found in ``in_dir``.

    Recognized inputs: ``eval.json`` (confusion matrix and curves),
    ``kfold.json`` (fold bars) and ``history.csv`` (training curves).
    """
    in_dir = Path(in_dir)
    out = Path(out_dir) if out_dir else in_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    eval_path = in_dir / "eval.json"
    if eval_path.exists():
        rep = json.loads(eval_path.read_text())
        written.append(plot_confusion(rep["confusion_matrix"], rep["classes"], out / "confusion.svg"))
        if any(c is not None for c in rep["curves"].values()):
            written.append(plot_curves(rep["curves"], "roc", out / "roc.svg", "ROC (one-vs-rest)"))
            written.append(plot_curves(rep["curves"], "pr", out / "pr.svg", "precision-recall"))
    kfold_path = in_dir / "kfold.json"
    if kfold_path.exists():
        kf = json.loads(kfold_path.read_text())
        for cfg_name, res in kf["configs"].items():
            written.append(plot_fold_bars(res["summary"], out / f"folds_{cfg_name}.svg"))
    hist_path = in_dir / "history.csv"
    if hist_path.exists():
        written.append(plot_history(hist_path, out / "history.svg"))
    return written
