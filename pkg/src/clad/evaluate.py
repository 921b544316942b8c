"""Window-level detection metrics and reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InputError
from .model import CLAD, collate


@dataclass
class MetricsReport:
    dataset: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    degenerate: bool = False
    threshold_rule: str = "argmax"

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with class 1 = anomalous."""
    pred = np.asarray(predictions).astype(np.int64).ravel()
    lab = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != lab.shape:
        raise InputError(f"{len(pred)} predictions for {len(lab)} labels")
    tp = int(np.sum((pred == 1) & (lab == 1)))
    fp = int(np.sum((pred == 1) & (lab == 0)))
    fn = int(np.sum((pred == 0) & (lab == 1)))
    tn = int(np.sum((pred == 0) & (lab == 0)))
    return tp, fp, fn, tn


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float, bool]:
    """Precision, recall, F1 and a flag set when any denominator was zero (metric reported as 0)."""
    degenerate = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return precision, recall, f1, degenerate


def report(predictions, labels, dataset="") -> MetricsReport:
    tp, fp, fn, tn = confusion(predictions, labels)
    p, r, f, deg = prf1(tp, fp, fn)
    return MetricsReport(dataset, tp, fp, fn, tn, p, r, f, deg)


def macro_f1(reports: Sequence[MetricsReport]) -> float:
    return float(np.mean([r.f1 for r in reports])) if reports else 0.0


@torch.no_grad()
def predict_windows(model: CLAD, windows, batch_size=64, return_logits=False):
    """Inference-mode argmax over every window (no dropout, no masking)."""
    was = model.training
    model.eval()
    preds, logits = [], []
    try:
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            batch = collate(chunk, config=model.config, pad_to="longest")
            out = model(batch.token_ids, batch.lengths)
            logits.append(out)
            preds.append(out.argmax(-1))
    finally:
        model.train(was)
    if not preds:
        p = np.zeros(0, dtype=np.int64)
        return (p, np.zeros((0, 2))) if return_logits else p
    p = torch.cat(preds).cpu().numpy()
    if return_logits:
        return p, torch.cat(logits).cpu().numpy()
    return p


def evaluate_model(model, windows, dataset="", batch_size=64, predictions_csv=None) -> MetricsReport:
    """Score ``model`` (a CLAD or a checkpoint path) on labeled compressed windows."""
    if not isinstance(model, CLAD):
        from .model import load_checkpoint

        model, _ = load_checkpoint(model)
    if len(windows) == 0:
        raise InputError("test set is empty")
    preds, logits = predict_windows(model, windows, batch_size, return_logits=True)
    labels = [w.label for w in windows]
    rep = report(preds, labels, dataset)
    if predictions_csv is not None:
        write_predictions(predictions_csv, windows, preds, logits)
    return rep


def write_predictions(path, windows, preds, logits=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "label", "prediction", "logit_normal", "logit_anomalous"])
        for i, cw in enumerate(windows):
            row = [cw.window_id, getattr(cw, "label", ""), int(preds[i])]
            if logits is not None:
                row += [f"{logits[i][0]:.6f}", f"{logits[i][1]:.6f}"]
            w.writerow(row)
