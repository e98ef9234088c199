"""
The 16 downstream tasks: dataset, sound type, task type, ordered class list, chunk
length and function group. Class index = position in `class_names`. Class counts are
documentation only and never read at evaluation time.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from functools import lru_cache
from typing import TYPE_CHECKING, Any, Iterable, Literal

from pydantic import BaseModel, ConfigDict

from ausculta.errors import LabelOutOfRange, NonIntegerCount, UnknownTask

if TYPE_CHECKING:
    from ausculta.corpus import Corpus

logger = logging.getLogger(__name__)

SoundType = Literal["L", "H", "B"]
TaskType = Literal["BC", "MC", "ML", "R"]
FunctionGroup = Literal["abnormality_detection", "disease_diagnosis", "activity_detection"]

FUNCTION_GROUPS: tuple[str, ...] = ("abnormality_detection", "disease_diagnosis", "activity_detection")
SOUND_TYPE_NAMES = {"L": "lung", "H": "heart", "B": "bowel"}
COUNT_RANGE = (0, 43)


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str
    name: str
    dataset_id: str
    sound_type: SoundType
    task_type: TaskType
    class_names: tuple[str, ...] = ()
    class_counts: tuple[int, ...] = ()
    chunk_s: float = 8.0
    function_group: FunctionGroup

    @property
    def n_outputs(self) -> int:
        """Head width: classes for BC/MC, labels for ML, 1 for R."""
        return 1 if self.task_type == "R" else len(self.class_names)

    @property
    def number(self) -> int:
        return int(self.task_id[1:])


def _task(task_id, name, dataset_id, sound_type, task_type, classes, counts, group, chunk_s=8.0) -> TaskSpec:
    return TaskSpec(
        task_id=task_id,
        name=name,
        dataset_id=dataset_id,
        sound_type=sound_type,
        task_type=task_type,
        class_names=tuple(classes),
        class_counts=tuple(counts),
        chunk_s=chunk_s,
        function_group=group,
    )


_AD, _DD, _ACT = FUNCTION_GROUPS


@lru_cache(maxsize=1)
def _registry() -> tuple[TaskSpec, ...]:
    return (
        _task("T1", "SPRSound_MC_Record", "sprsound", "L", "MC",
              ["Normal", "Adventitious", "Poor Quality"], [2324, 1000, 230], _AD),
        _task("T2", "SPRSound_MC_Record", "sprsound", "L", "MC",
              ["Normal", "CAS", "DAS", "CAS&DAS", "Poor Quality"], [2324, 368, 480, 152, 230], _AD),
        _task("T3", "HF_Lung_BC_LungSound", "hf_lung", "L", "BC",
              ["Normal", "Abnormal"], [52444, 29489], _AD),
        _task("T4", "HF_Lung_MC_LungSound", "hf_lung", "L", "MC",
              ["Inhalation", "Exhalation", "CAS", "DAS"], [34095, 18349, 13883, 15606], _AD),
        _task("T5", "HF_Lung_MC_LungSound", "hf_lung", "L", "MC",
              ["Inhalation", "Exhalation", "Wheeze", "Stridor", "Rhonchi", "Crackle"],
              [34095, 18349, 8457, 686, 4740, 15606], _AD),
        _task("T6", "ICBHI2017_MC_LungSound", "icbhi2017", "L", "MC",
              ["Normal", "Crackle", "Wheeze", "Crackle&Wheeze"], [3642, 1864, 886, 506], _AD),
        _task("T7", "LungSound_MC_LungSound", "lung_sound", "L", "MC",
              ["Normal", "Crepitation", "Wheeze", "Crackle", "Bronchi", "Wheeze&Crackle", "Bronchi&Crackle"],
              [105, 69, 123, 24, 3, 6, 6], _AD),
        _task("T8", "Circor2022_MC_Murmur", "circor2022", "H", "MC",
              ["Present", "Absent", "Unknown"], [363, 2391, 156], _AD),
        _task("T9", "ICBHI2017_MC_Disease", "icbhi2017", "L", "MC",
              ["Healthy", "Bronchiectasis", "Bronchiolitis", "COPD", "Pneumonia", "URTI"],
              [35, 16, 13, 793, 37, 23], _DD),
        _task("T10", "LungSound_ML_Disease", "lung_sound", "L", "ML",
              ["Normal", "Asthma", "Pneumonia", "COPD", "BRON", "Heart failure", "Lung fibrosis", "Pleural effusion"],
              [105, 99, 15, 33, 9, 63, 18, 6], _DD),
        _task("T11", "RD@TR_MC_Disease", "rd_tr", "L", "MC",
              ["COPD0", "COPD1", "COPD2", "COPD3", "COPD4"], [72, 60, 84, 84, 204], _DD),
        _task("T12", "Korean_MC_Disease", "korean", "H", "MC",
              ["Normal", "Aortic Stenosis", "Mitral Regurgitation", "Mitral Stenosis", "Murmur in Systole"],
              [200, 200, 200, 200, 200], _DD, chunk_s=4.0),
        _task("T13", "Cinc2016_BC_Disease", "cinc2016", "H", "BC",
              ["Normal", "Abnormal"], [2575, 665], _DD),
        _task("T14", "Circor2022_BC_Disease", "circor2022", "H", "BC",
              ["Normal", "Abnormal"], [1632, 1531], _DD),
        _task("T15", "HSDReport_BC_Disease", "hsdreport", "H", "BC",
              ["Normal", "Abnormal"], [247, 2028], _DD),
        _task("T16", "BowelSound_R_Count", "bowel_sound", "B", "R",
              [], [], _ACT, chunk_s=2.0),
    )


def builtin_registry() -> list[TaskSpec]:
    return list(_registry())


TASK_IDS: tuple[str, ...] = tuple(t.task_id for t in _registry())


def get_task(task_id: str) -> TaskSpec:
    for t in _registry():
        if t.task_id == task_id:
            return t
    raise UnknownTask(f"unknown task {task_id!r}; expected one of {', '.join(TASK_IDS)}")


def registry_json(indent: int | None = 2) -> str:
    return json.dumps([t.model_dump(mode="json") for t in _registry()], indent=indent)


def check_label(task: TaskSpec, value: Any) -> None:
    """Raise LabelOutOfRange / NonIntegerCount if `value` is not a valid label for `task`."""
    k = len(task.class_names)
    if task.task_type == "R":
        lo, hi = COUNT_RANGE
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise NonIntegerCount(f"{task.task_id}: count must be a number, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise NonIntegerCount(f"{task.task_id}: count {value!r} is not an integer")
        if not lo <= value <= hi:
            raise LabelOutOfRange(f"{task.task_id}: count {value!r} outside [{lo}, {hi}]")
        return
    if task.task_type == "ML":
        if not isinstance(value, (list, tuple)) or len(value) != k:
            raise LabelOutOfRange(f"{task.task_id}: expected a {k}-element 0/1 vector, got {value!r}")
        if any(isinstance(v, bool) or v not in (0, 1) for v in value):
            raise LabelOutOfRange(f"{task.task_id}: multi-label entries must be 0 or 1, got {value!r}")
        return
    if isinstance(value, bool) or not isinstance(value, int):
        raise LabelOutOfRange(f"{task.task_id}: class label must be an integer index, got {value!r}")
    if not 0 <= value < k:
        raise LabelOutOfRange(f"{task.task_id}: class index {value} outside [0, {k}) ({k} classes)")


class LabelReport(BaseModel):
    task_id: str
    n_labeled: int
    class_counts: dict[str, int]
    split_counts: dict[str, int]


def validate_labels(task: TaskSpec, corpus: "Corpus") -> LabelReport:
    counts: Counter = Counter()
    splits: Counter = Counter()
    n = 0
    for rec in corpus.records:
        if task.task_id not in rec.labels:
            continue
        value = rec.labels[task.task_id]
        try:
            check_label(task, value)
        except LabelOutOfRange as e:
            raise type(e)(f"record {rec.record_id}: {e}") from e
        n += 1
        splits[rec.split] += 1
        if task.task_type == "R":
            counts[str(int(value))] += 1
        elif task.task_type == "ML":
            for name, bit in zip(task.class_names, value):
                counts[name] += int(bit)
        else:
            counts[task.class_names[value]] += 1
    if task.task_type in ("BC", "MC", "ML"):
        for name in task.class_names:
            counts.setdefault(name, 0)
    logger.info("%s: %d labeled records", task.task_id, n)
    return LabelReport(task_id=task.task_id, n_labeled=n, class_counts=dict(counts), split_counts=dict(splits))


def tasks_in_group(tasks: Iterable[str], group: str) -> list[str]:
    if group == "overall":
        return list(tasks)
    return [t for t in tasks if get_task(t).function_group == group]
