"""Multi-label precision/recall/F1 and ROC-AUC under the four averaging
schemes (samples, micro, macro, weighted).

Zero-division convention throughout: a precision, recall, or F1 whose
denominator is 0 evaluates to 0.  Per-class AUC is undefined for single-class
columns; those are excluded from macro/weighted averages with a counted
warning.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text
from .dataset import LabeledMolecule, LabelIndex
from .model import ModelConfig, ParameterStore, predict_probabilities
from .tokenizer import Tokenizer

logger = logging.getLogger("ontograft.metrics")

AVERAGINGS = ("samples", "micro", "macro", "weighted")


class MetricsError(Exception):
    pass


def binarize(y_score: np.ndarray, threshold: float) -> np.ndarray:
    """Elementwise score >= threshold (ties count as positive)."""
    return (np.asarray(y_score) >= threshold).astype(np.int8)


def _prf_from_counts(tp, fp, fn):
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    fn = np.asarray(fn, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(
            precision + recall > 0,
            2 * precision * recall / (precision + recall),
            0.0,
        )
    return precision, recall, f1


def _check_shapes(y_true: np.ndarray, y_other: np.ndarray):
    y_true = np.asarray(y_true)
    y_other = np.asarray(y_other)
    if y_true.ndim != 2 or y_true.shape != y_other.shape:
        raise MetricsError(
            f"shape mismatch: {y_true.shape} vs {y_other.shape} (need equal 2-D)"
        )
    return y_true, y_other


def _left_fold_mean(values: np.ndarray) -> float:
    # Sequential sum, not numpy's pairwise reduction: output must equal a
    # plain per-definition loop bit for bit.
    return sum(values.tolist()) / values.size


def prf(
    y_true: np.ndarray, y_pred: np.ndarray, averaging: str
) -> tuple[float, float, float]:
    """(precision, recall, f1) under the requested averaging scheme."""
    y_true, y_pred = _check_shapes(y_true, y_pred)
    if averaging not in AVERAGINGS:
        raise MetricsError(f"unknown averaging {averaging!r}")
    t = y_true.astype(bool)
    p = y_pred.astype(bool)
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)

    if averaging == "micro":
        prec, rec, f1 = _prf_from_counts(tp.sum(), fp.sum(), fn.sum())
        return float(prec), float(rec), float(f1)
    if averaging == "macro":
        prec, rec, f1 = _prf_from_counts(tp, fp, fn)
        return _left_fold_mean(prec), _left_fold_mean(rec), _left_fold_mean(f1)
    if averaging == "weighted":
        prec, rec, f1 = _prf_from_counts(tp, fp, fn)
        support = t.sum(axis=0).astype(np.float64)
        total = support.sum()
        if total == 0:
            return 0.0, 0.0, 0.0
        return (
            float(sum((prec * support).tolist()) / total),
            float(sum((rec * support).tolist()) / total),
            float(sum((f1 * support).tolist()) / total),
        )
    # samples: per-row metrics, then their mean
    row_tp = (t & p).sum(axis=1)
    row_fp = (~t & p).sum(axis=1)
    row_fn = (t & ~p).sum(axis=1)
    prec, rec, f1 = _prf_from_counts(row_tp, row_fp, row_fn)
    return _left_fold_mean(prec), _left_fold_mean(rec), _left_fold_mean(f1)


def _binary_auc(y: np.ndarray, s: np.ndarray) -> float | None:
    """Mann-Whitney AUC with ties counted half; None when only one class is
    present."""
    y = np.asarray(y).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(np.asarray(s, dtype=np.float64))
    rank_sum = ranks[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc_detail(
    y_true: np.ndarray, y_score: np.ndarray, averaging: str
) -> tuple[float, int]:
    """(auc, number of undefined columns/rows excluded)."""
    y_true, y_score = _check_shapes(y_true, y_score)
    if averaging not in AVERAGINGS:
        raise MetricsError(f"unknown averaging {averaging!r}")
    if averaging == "micro":
        auc = _binary_auc(y_true.reshape(-1), y_score.reshape(-1))
        return (auc if auc is not None else 0.0), (0 if auc is not None else 1)
    if averaging == "samples":
        per_row = [_binary_auc(y_true[i], y_score[i]) for i in range(y_true.shape[0])]
        valid = [a for a in per_row if a is not None]
        excluded = len(per_row) - len(valid)
        return (float(np.mean(valid)) if valid else 0.0), excluded
    per_col = [_binary_auc(y_true[:, j], y_score[:, j]) for j in range(y_true.shape[1])]
    valid_idx = [j for j, a in enumerate(per_col) if a is not None]
    excluded = y_true.shape[1] - len(valid_idx)
    if not valid_idx:
        return 0.0, excluded
    if averaging == "macro":
        return float(np.mean([per_col[j] for j in valid_idx])), excluded
    support = y_true.astype(bool).sum(axis=0).astype(np.float64)
    weights = support[valid_idx]
    total = weights.sum()
    if total == 0:
        return 0.0, excluded
    return (
        float(sum(per_col[j] * support[j] for j in valid_idx) / total),
        excluded,
    )


def roc_auc(y_true: np.ndarray, y_score: np.ndarray, averaging: str) -> float:
    auc, excluded = roc_auc_detail(y_true, y_score, averaging)
    if excluded:
        logger.warning(
            "roc_auc(%s): excluded %d single-class column(s)/row(s)",
            averaging,
            excluded,
        )
    return auc


@dataclass
class MetricReport:
    """averaging -> {f1, precision, recall, roc_auc}, plus AUC exclusion
    counts per averaging."""

    threshold: float
    values: dict[str, dict[str, float]] = field(default_factory=dict)
    auc_excluded: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "threshold": self.threshold,
            "metrics": self.values,
            "auc_excluded_columns": self.auc_excluded,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def compute_report(
    y_true: np.ndarray, y_score: np.ndarray, threshold: float = 0.5
) -> MetricReport:
    y_pred = binarize(y_score, threshold)
    report = MetricReport(threshold=threshold)
    for averaging in AVERAGINGS:
        precision, recall, f1 = prf(y_true, y_pred, averaging)
        auc, excluded = roc_auc_detail(y_true, y_score, averaging)
        report.values[averaging] = {
            "f1": f1,
            "precision": precision,
            "recall": recall,
            "roc_auc": auc,
        }
        report.auc_excluded[averaging] = excluded
    return report


def per_class_f1_rows(
    y_true: np.ndarray, y_pred: np.ndarray, labels: LabelIndex
) -> list[tuple[str, int, float]]:
    t = y_true.astype(bool)
    p = y_pred.astype(bool)
    _, _, f1 = _prf_from_counts(
        (t & p).sum(axis=0), (~t & p).sum(axis=0), (t & ~p).sum(axis=0)
    )
    support = t.sum(axis=0)
    return [
        (cid, int(support[j]), float(f1[j])) for j, cid in enumerate(labels)
    ]


def per_molecule_f1_rows(y_true: np.ndarray, y_pred: np.ndarray) -> list[tuple[int, float]]:
    t = y_true.astype(bool)
    p = y_pred.astype(bool)
    _, _, f1 = _prf_from_counts(
        (t & p).sum(axis=1), (~t & p).sum(axis=1), (t & ~p).sum(axis=1)
    )
    return [(i, float(f1[i])) for i in range(y_true.shape[0])]


def evaluate_model(
    store: ParameterStore,
    config: ModelConfig,
    tokenizer: Tokenizer,
    molecules: list[LabeledMolecule],
    labels: LabelIndex,
    threshold: float = 0.5,
    batch_size: int = 32,
):
    """Full report plus the per-class and per-molecule F1 tables."""
    if len(labels) != config.n_labels:
        raise MetricsError(
            f"label index has {len(labels)} classes, model expects {config.n_labels}"
        )
    seqs = [tokenizer.encode(m.smiles, truncate=True) for m in molecules]
    y_true = np.stack([m.labels for m in molecules]).astype(np.int8)
    y_score = predict_probabilities(store, config, seqs, batch_size)
    y_pred = binarize(y_score, threshold)
    report = compute_report(y_true, y_score, threshold)
    class_rows = per_class_f1_rows(y_true, y_pred, labels)
    molecule_rows = per_molecule_f1_rows(y_true, y_pred)
    return report, class_rows, molecule_rows


def write_report(report: MetricReport, class_rows, molecule_rows, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "report.json"), report.to_json())
    lines = ["class_id,support,f1"]
    lines += [f"{cid},{support},{f1:.10g}" for cid, support, f1 in class_rows]
    atomic_write_text(os.path.join(out_dir, "per_class_f1.csv"), "\n".join(lines) + "\n")
    lines = ["row_index,f1"]
    lines += [f"{idx},{f1:.10g}" for idx, f1 in molecule_rows]
    atomic_write_text(os.path.join(out_dir, "per_molecule_f1.csv"), "\n".join(lines) + "\n")
