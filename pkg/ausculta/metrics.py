"""
Per-task evaluation metrics (Macro/Micro-F1, class-wise F1, AUROC, count accuracy),
cross-model class-wise normalization and the scores JSON interchange
{model: {task: {metric: value}}} consumed by rank_aggregate.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.stats import rankdata
from sklearn.metrics import f1_score, precision_recall_fscore_support

from ausculta.bench_tasks import TaskSpec
from ausculta.errors import EmptyEvaluation, ScoresSchemaError, ShapeMismatch, SingleClassOnly
from ausculta.fileio import atomic_write_text

logger = logging.getLogger(__name__)

ML_THRESHOLD = 0.5
F1_METRICS = frozenset({"macro_f1", "micro_f1"})


class F1Report(BaseModel):
    macro: float
    micro: float
    per_class: list[float]
    # classes that entered the macro mean
    counted: list[int]


class EvalResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str
    metric: str
    value: float
    per_class: Optional[list[float]] = None
    n_eval: int


def _as_labels(values: Sequence[int], k: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= k):
        raise ShapeMismatch(f"{name} contain class indices outside [0, {k})")
    return arr


def f1_scores(preds: Sequence[int], labels: Sequence[int], k: int) -> F1Report:
    """
    One-vs-rest F1 per class (0 when precision + recall = 0). Macro averages the
    classes present in the labels or the predictions; micro pools TP/FP/FN.
    """
    if len(preds) != len(labels):
        raise ShapeMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyEvaluation("no records to evaluate")
    p = _as_labels(preds, k, "predictions")
    y = _as_labels(labels, k, "labels")
    classes = list(range(k))
    _, _, per_class, _ = precision_recall_fscore_support(y, p, labels=classes, average=None, zero_division=0)
    counted = sorted(set(y.tolist()) | set(p.tolist()))
    macro = float(np.mean(per_class[counted]))
    micro = float(f1_score(y, p, labels=classes, average="micro", zero_division=0))
    return F1Report(macro=macro, micro=micro, per_class=[float(v) for v in per_class], counted=counted)


def multilabel_f1(preds: np.ndarray, labels: np.ndarray) -> tuple[float, float, list[float]]:
    """Per-label F1 over binary indicator matrices; returns (macro, micro, per_label)."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeMismatch(f"prediction matrix {p.shape} vs label matrix {y.shape}")
    if p.shape[0] == 0:
        raise EmptyEvaluation("no records to evaluate")
    per_label = f1_score(y, p, average=None, zero_division=0)
    micro = float(f1_score(y, p, average="micro", zero_division=0))
    return float(np.mean(per_label)), micro, [float(v) for v in per_label]


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with midranks for tied scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly("AUROC needs both positive and negative records")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def regression_accuracy(preds: Sequence[int], labels: Sequence[int], tolerance: int = 0) -> float:
    """Fraction of records whose rounded count is within `tolerance` of the truth."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"{p.shape[0]} predictions vs {y.shape[0]} labels")
    if p.size == 0:
        raise EmptyEvaluation("no records to evaluate")
    return float(np.mean(np.abs(p - y) <= tolerance))


def normalize_classwise(per_class_f1: np.ndarray) -> np.ndarray:
    """Column-wise (per class) min-max across models; constant columns map to 0."""
    m = np.asarray(per_class_f1, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ShapeMismatch(f"need a models x classes matrix with >= 2 models, got shape {m.shape}")
    lo = m.min(axis=0, keepdims=True)
    span = m.max(axis=0, keepdims=True) - lo
    return np.where(span > 0, (m - lo) / np.where(span > 0, span, 1.0), 0.0)


def evaluate_task(task: TaskSpec, predictions, labels: Mapping[str, object]) -> list[EvalResult]:
    """
    Score a PredictionSet against record labels. Records without a label are ignored.
    BC: macro_f1, micro_f1, auroc; MC and ML: macro_f1, micro_f1; R: accuracy and
    accuracy_pm1 on rounded counts clamped to [0, 43]. For BC, MC and ML the macro_f1
    result carries the per-class F1 in `per_class` (update_scores stores it as class_f1).
    """
    from ausculta.probe import count_prediction

    rows = [p for p in predictions.predictions if p.record_id in labels]
    n = len(rows)
    if n == 0:
        raise EmptyEvaluation(f"{task.task_id}: no labeled predictions")
    truth = [labels[p.record_id] for p in rows]

    def result(metric: str, value: float, per_class: Optional[list[float]] = None) -> EvalResult:
        return EvalResult(task_id=task.task_id, metric=metric, value=value, per_class=per_class, n_eval=n)

    if task.task_type == "R":
        counts = [count_prediction(p.count) for p in rows]
        y = [int(v) for v in truth]
        return [
            result("accuracy", regression_accuracy(counts, y)),
            result("accuracy_pm1", regression_accuracy(counts, y, tolerance=1)),
        ]
    if task.task_type == "ML":
        probs = np.stack([p.probs for p in rows])
        macro, micro, per_label = multilabel_f1((probs >= ML_THRESHOLD).astype(int), np.asarray(truth))
        return [result("macro_f1", macro, per_label), result("micro_f1", micro)]

    k = len(task.class_names)
    probs = np.stack([p.probs for p in rows])
    report = f1_scores(np.argmax(probs, axis=1), truth, k)
    out = [result("macro_f1", report.macro, report.per_class), result("micro_f1", report.micro)]
    if task.task_type == "BC":
        try:
            out.append(result("auroc", auroc(probs[:, 1], truth)))
        except SingleClassOnly:
            logger.warning("%s: evaluation split holds one class; AUROC skipped", task.task_id)
    return out


# --- scores JSON ---

ScoreValue = Union[float, list[float]]
ScoresDict = dict[str, dict[str, dict[str, ScoreValue]]]


def read_scores(path: Path | str) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScoresSchemaError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e


def update_scores(path: Path | str, model: str, results: Sequence[EvalResult], f1_scale: float = 1.0) -> Path:
    """
    Merge results into the scores JSON under `model`; class-wise F1 goes under 'class_f1'.
    `f1_scale=100` stores F1 values in percent, matching the shipped published scores.
    """
    path = Path(path)
    doc = read_scores(path) if path.exists() else {}
    scores: ScoresDict = doc["scores"] if "scores" in doc else doc
    entry = scores.setdefault(model, {})
    for r in results:
        task_scores = entry.setdefault(r.task_id, {})
        scale = f1_scale if r.metric.split("_std")[0] in F1_METRICS else 1.0
        task_scores[r.metric] = r.value * scale
        if r.metric == "macro_f1" and r.per_class is not None:
            task_scores["class_f1"] = [v * scale for v in r.per_class]
    return atomic_write_text(path, json.dumps(doc if "scores" in doc else scores, indent=2) + "\n")
