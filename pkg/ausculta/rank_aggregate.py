"""
Cross-model rank aggregation over a scores document: per-task reciprocal ranks, MRR
per function group, Borda count per sound type or task type, best-task counts.

Ranking is by descending score with competition ranking (ties share the minimum rank).
A scores document may carry `tie_breaks: {metric: {task: [model, ...]}}`; tied models
listed there take consecutive ranks in list order. Best counts ignore tie breaks.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy.stats import rankdata

from ausculta.bench_tasks import FUNCTION_GROUPS, SOUND_TYPE_NAMES, TASK_IDS, get_task, tasks_in_group
from ausculta.errors import EmptyGroup, IncompleteColumn, ScoresSchemaError, ShapeMismatch
from ausculta.fileio import atomic_write_text
from ausculta.metrics import normalize_classwise

logger = logging.getLogger(__name__)

Grouping = Literal["function", "sound", "tasktype"]
GROUPINGS: tuple[str, ...] = ("function", "sound", "tasktype")
OVERALL = "overall"

ScoreValue = Union[float, list[float]]


class ScoresDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scores: dict[str, dict[str, dict[str, ScoreValue]]]
    tie_breaks: dict[str, dict[str, list[str]]] = {}
    sources: dict[str, str] = {}

    @property
    def models(self) -> list[str]:
        return list(self.scores)


def _line_of(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return i
    return 1


def parse_scores(text: str, source: str = "<scores>") -> ScoresDocument:
    """Accepts the full document form or a bare {model: {task: {metric: value}}} mapping."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScoresSchemaError(f"{source}:{e.lineno}: invalid JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ScoresSchemaError(f"{source}:1: top level must be an object")
    if "scores" not in raw:
        raw = {"scores": raw}
    try:
        doc = ScoresDocument.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        keys = [str(k) for k in err["loc"] if not isinstance(k, int)]
        # loc starts with the section name; point at the deepest key present in the text
        line = next((_line_of(text, k) for k in reversed(keys) if f'"{k}"' in text), 1)
        where = ".".join(str(k) for k in err["loc"])
        raise ScoresSchemaError(f"{source}:{line}: {where}: {err['msg']}") from e
    for metric, per_task in doc.tie_breaks.items():
        for task_id, order in per_task.items():
            unknown = [m for m in order if m not in doc.scores]
            if unknown:
                raise ScoresSchemaError(
                    f"{source}:{_line_of(text, task_id)}: tie_breaks.{metric}.{task_id} names unknown models {unknown}"
                )
    return doc


def load_scores(path: Path | str) -> ScoresDocument:
    path = Path(path)
    return parse_scores(path.read_text(encoding="utf-8"), source=str(path))


@dataclass(frozen=True)
class ScoreTable:
    """models x tasks matrix of one metric; NaN marks a missing score."""

    metric: str
    models: tuple[str, ...]
    tasks: tuple[str, ...]
    values: np.ndarray
    tie_breaks: Mapping[str, Sequence[str]] = field(default_factory=dict)

    @classmethod
    def from_scores(
        cls,
        doc: ScoresDocument,
        metric: str,
        tasks: Optional[Sequence[str]] = None,
        models: Optional[Sequence[str]] = None,
        drop_incomplete: bool = False,
    ) -> "ScoreTable":
        models = tuple(models) if models is not None else tuple(doc.models)
        missing = [m for m in models if m not in doc.scores]
        if missing:
            raise ScoresSchemaError(f"models not in scores document: {missing}")
        if tasks is None:
            tasks = [t for t in TASK_IDS if any(metric in doc.scores[m].get(t, {}) for m in models)]
        values = np.full((len(models), len(tasks)), np.nan)
        for i, m in enumerate(models):
            for j, t in enumerate(tasks):
                v = doc.scores[m].get(t, {}).get(metric)
                if isinstance(v, (int, float)):
                    values[i, j] = float(v)
        table = cls(metric, models, tuple(tasks), values, dict(doc.tie_breaks.get(metric, {})))
        if drop_incomplete:
            holes = [t for j, t in enumerate(table.tasks) if np.isnan(values[:, j]).any()]
            if holes:
                logger.warning("%s: dropping incomplete tasks %s", metric, ", ".join(holes))
                keep = [j for j, t in enumerate(table.tasks) if t not in holes]
                table = cls(metric, models, tuple(table.tasks[j] for j in keep), values[:, keep], table.tie_breaks)
        return table

    def column(self, task_id: str) -> np.ndarray:
        if task_id not in self.tasks:
            raise IncompleteColumn(f"{self.metric}: task {task_id} not in table")
        col = self.values[:, self.tasks.index(task_id)]
        if np.isnan(col).any():
            absent = [m for m, v in zip(self.models, col) if np.isnan(v)]
            raise IncompleteColumn(f"{self.metric}/{task_id}: no score for {', '.join(absent)}")
        return col


def _apply_tie_break(col: np.ndarray, ranks: np.ndarray, models: Sequence[str], order: Sequence[str]) -> np.ndarray:
    ranks = ranks.copy()
    for value in np.unique(col):
        tied = np.flatnonzero(col == value)
        if tied.size < 2:
            continue
        listed = [i for name in order for i in tied if models[i] == name]
        rest = [i for i in tied if i not in listed]
        start = int(ranks[tied[0]])
        for offset, i in enumerate(listed):
            ranks[i] = start + offset
        for i in rest:
            ranks[i] = start + len(listed)
    return ranks


def task_ranks(table: ScoreTable, task_id: str, use_tie_breaks: bool = True) -> np.ndarray:
    col = table.column(task_id)
    if len(table.models) < 2:
        raise ShapeMismatch(f"ranking needs >= 2 models, got {len(table.models)}")
    ranks = rankdata(-col, method="min").astype(np.int64)
    order = table.tie_breaks.get(task_id) if use_tie_breaks else None
    if order:
        ranks = _apply_tie_break(col, ranks, table.models, order)
    return ranks


def reciprocal_ranks(table: ScoreTable, task_id: str) -> dict[str, float]:
    ranks = task_ranks(table, task_id)
    return {m: 1.0 / float(r) for m, r in zip(table.models, ranks)}


def mrr(table: ScoreTable, group: str = OVERALL) -> dict[str, float]:
    """Mean reciprocal rank over the table's tasks in a function group (or 'overall')."""
    tasks = tasks_in_group(table.tasks, group)
    if not tasks:
        raise EmptyGroup(f"{table.metric}: no tasks in group {group}")
    rr = np.array([[reciprocal_ranks(table, t)[m] for t in tasks] for m in table.models])
    return {m: float(v) for m, v in zip(table.models, rr.mean(axis=1))}


def _group_key(task_id: str, group_by: str) -> str:
    task = get_task(task_id)
    if group_by == "sound_type":
        return SOUND_TYPE_NAMES[task.sound_type]
    if group_by == "task_type":
        return task.task_type
    raise ValueError(f"unknown Borda grouping {group_by!r}")


def borda(table: ScoreTable, group_by: str = "sound_type") -> dict[str, dict[str, float]]:
    """
    Per task, the model at rank r of m earns m - r points; a group's score is the sum
    over its tasks. Returns {group: {model: points}} in first-seen group order.
    """
    if not table.tasks:
        raise EmptyGroup(f"{table.metric}: no tasks to aggregate")
    m = len(table.models)
    out: dict[str, dict[str, float]] = {}
    for t in table.tasks:
        points = m - task_ranks(table, t)
        group = out.setdefault(_group_key(t, group_by), {name: 0.0 for name in table.models})
        for name, p in zip(table.models, points):
            group[name] += float(p)
    return out


def best_counts(table: ScoreTable) -> dict[str, int]:
    """Tasks on which each model ranks first; tied leaders all count."""
    counts = {m: 0 for m in table.models}
    for t in table.tasks:
        for m, r in zip(table.models, task_ranks(table, t, use_tie_breaks=False)):
            if r == 1:
                counts[m] += 1
    return counts


class RankReport(BaseModel):
    metric: str
    grouping: Grouping
    aggregate: Literal["mrr", "borda"]
    models: list[str]
    tasks: list[str]
    reciprocal_ranks: dict[str, dict[str, float]]
    groups: dict[str, dict[str, float]]
    best_counts: dict[str, int]
    tie_breaks: dict[str, list[str]] = {}

    def to_json(self) -> str:
        return self.model_dump_json(indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group", *self.models])
        for group, per_model in self.groups.items():
            writer.writerow([group, *(repr(per_model[m]) for m in self.models)])
        return buf.getvalue()

    def write(self, out_dir: Path | str, stem: Optional[str] = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        stem = stem or f"rank_{self.metric}_{self.grouping}"
        return (
            atomic_write_text(out_dir / f"{stem}.json", self.to_json()),
            atomic_write_text(out_dir / f"{stem}.csv", self.to_csv()),
        )


def build_rank_report(table: ScoreTable, grouping: Grouping = "function") -> RankReport:
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}; choose from {', '.join(GROUPINGS)}")
    rr = {t: reciprocal_ranks(table, t) for t in table.tasks}
    if grouping == "function":
        present = [g for g in FUNCTION_GROUPS if tasks_in_group(table.tasks, g)]
        groups = {g: mrr(table, g) for g in [*present, OVERALL]}
        aggregate = "mrr"
    else:
        groups = borda(table, "sound_type" if grouping == "sound" else "task_type")
        aggregate = "borda"
    report = RankReport(
        metric=table.metric,
        grouping=grouping,
        aggregate=aggregate,
        models=list(table.models),
        tasks=list(table.tasks),
        reciprocal_ranks=rr,
        groups=groups,
        best_counts=best_counts(table),
        tie_breaks={t: list(v) for t, v in table.tie_breaks.items() if t in table.tasks},
    )
    logger.info("%s/%s: %d tasks, %d models, %d groups", table.metric, grouping, len(table.tasks), len(table.models), len(groups))
    return report


# --- class-wise comparison ---

def classwise_matrix(doc: ScoresDocument, task_id: str, models: Optional[Sequence[str]] = None) -> tuple[list[str], list[str], np.ndarray]:
    """(models, class names, models x classes min-max-normalized F1) from stored class_f1 lists."""
    task = get_task(task_id)
    models = list(models) if models is not None else doc.models
    rows = []
    for m in models:
        entry = doc.scores.get(m, {}).get(task_id, {})
        per_class = entry.get("class_f1")
        if not isinstance(per_class, list):
            raise IncompleteColumn(f"{task_id}: no class_f1 for {m}")
        if len(per_class) != len(task.class_names):
            raise ShapeMismatch(f"{task_id}: {m} has {len(per_class)} class scores, task has {len(task.class_names)} classes")
        rows.append(per_class)
    return models, list(task.class_names), normalize_classwise(np.asarray(rows, dtype=np.float64))
