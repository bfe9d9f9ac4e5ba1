"""Evaluation reports: one JSON summary plus static PNG plots.

Output is byte-stable for identical inputs: JSON uses sorted keys and
plots draw from explicitly ordered data with a fixed figure size.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from dbom.metrics import BiasCurve, CzslMetrics, PoisonMetrics

_LOSS_KEYS = ("total", "ret", "tri", "obj", "sp", "vis")


def _jsonable(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _loss_curve(history: Sequence[Mapping], path: Path) -> None:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in _LOSS_KEYS:
        if all(key in h for h in history):
            ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _bias_plot(curve: BiasCurve, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve.biases, curve.seen_acc, label="seen")
    ax.plot(curve.biases, curve.unseen_acc, label="unseen")
    ax.set_xlabel("bias on seen-pair logits")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _lambda_plot(rows: Sequence[tuple[float, CzslMetrics]], path: Path) -> None:
    lams = [lam for lam, _ in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pick in (("seen", lambda m: m.seen_acc),
                        ("unseen", lambda m: m.unseen_acc),
                        ("auc", lambda m: m.auc)):
        values = [pick(m) for _, m in rows]
        if all(v is not None for v in values):
            ax.plot(lams, values, marker="o", label=label)
    ax.set_xlabel("lambda_vis")
    ax.set_ylabel("score")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _confusion_plot(counts: np.ndarray, names: Sequence[str], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("predicted trigger")
    ax.set_ylabel("true trigger")
    threshold = counts.max() / 2 if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            color = "white" if counts[i, j] > threshold else "black"
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    color=color, fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def report(metrics: CzslMetrics | None, history: Sequence[Mapping], out_dir: str | Path,
           *, poison: PoisonMetrics | None = None, bias: BiasCurve | None = None,
           lambda_sweep: Mapping[float, CzslMetrics] | None = None,
           confusion: np.ndarray | None = None,
           trigger_names: Sequence[str] | None = None,
           extra: Mapping | None = None) -> dict[str, Path]:
    """Write report.json plus whichever plots the inputs support.

    history rows are per-epoch loss dicts (may be empty); lambda_sweep
    maps a sweep value to its metrics; confusion needs trigger_names.
    Returns the written files keyed by a short name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if confusion is not None and trigger_names is None:
        raise ValueError("confusion matrix needs trigger_names")

    sweep_rows = None
    if lambda_sweep is not None:
        sweep_rows = sorted(lambda_sweep.items())

    payload: dict = {
        "czsl": metrics.to_dict() if metrics is not None else None,
        "poison": poison.to_dict() if poison is not None else None,
        "history": [dict(h) for h in history],
    }
    if sweep_rows is not None:
        payload["lambda_sweep"] = [{"value": lam, **m.to_dict()} for lam, m in sweep_rows]
    if confusion is not None:
        payload["trigger_confusion"] = {
            "names": list(trigger_names),
            "counts": confusion.tolist(),
        }
    if extra:
        payload.update(extra)

    files: dict[str, Path] = {"report": out / "report.json"}
    files["report"].write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n",
        encoding="utf-8",
    )
    if history:
        files["loss_curve"] = out / "loss_curve.png"
        _loss_curve(history, files["loss_curve"])
    if bias is not None:
        files["bias_sweep"] = out / "bias_sweep.png"
        _bias_plot(bias, files["bias_sweep"])
    if sweep_rows:
        files["lambda_sweep"] = out / "lambda_sweep.png"
        _lambda_plot(sweep_rows, files["lambda_sweep"])
    if confusion is not None:
        files["trigger_confusion"] = out / "trigger_confusion.png"
        _confusion_plot(np.asarray(confusion), trigger_names, files["trigger_confusion"])
    return files
