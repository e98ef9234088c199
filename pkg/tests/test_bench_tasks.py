"""
Tests for ausculta.bench_tasks: the built-in registry, label checks and grouping helpers.
"""
from __future__ import annotations

import json

import pytest

N_TASKS = 16
GROUP_SIZES = {"abnormality_detection": 8, "disease_diagnosis": 7, "activity_detection": 1}


def test_registry_has_sixteen_ordered_tasks():
    from ausculta.bench_tasks import TASK_IDS, builtin_registry

    assert len(TASK_IDS) == N_TASKS
    assert TASK_IDS == tuple(f"T{i}" for i in range(1, N_TASKS + 1))
    assert [t.number for t in builtin_registry()] == list(range(1, N_TASKS + 1))


def test_task_types_and_heads():
    from ausculta.bench_tasks import get_task

    assert get_task("T3").task_type == "BC"
    assert get_task("T7").n_outputs == 7
    assert get_task("T10").task_type == "ML"
    assert get_task("T10").n_outputs == 8
    assert get_task("T16").task_type == "R"
    assert get_task("T16").n_outputs == 1
    assert get_task("T12").chunk_s == 4.0


def test_unknown_task():
    from ausculta.bench_tasks import get_task
    from ausculta.errors import UnknownTask

    with pytest.raises(UnknownTask):
        get_task("T17")


def test_function_groups_partition_tasks():
    from ausculta.bench_tasks import FUNCTION_GROUPS, TASK_IDS, tasks_in_group

    sizes = {g: len(tasks_in_group(TASK_IDS, g)) for g in FUNCTION_GROUPS}
    assert sizes == GROUP_SIZES
    assert tasks_in_group(TASK_IDS, "overall") == list(TASK_IDS)


def test_registry_json_round_trips():
    from ausculta.bench_tasks import registry_json

    rows = json.loads(registry_json())
    assert len(rows) == N_TASKS
    assert rows[0]["class_names"] == ["Normal", "Adventitious", "Poor Quality"]


# --- check_label ---

@pytest.mark.parametrize("task_id,value", [("T3", 1), ("T9", 5), ("T10", [0, 1, 0, 0, 0, 0, 0, 1]), ("T16", 0), ("T16", 43), ("T16", 12.0)])
def test_check_label_accepts(task_id, value):
    from ausculta.bench_tasks import check_label, get_task

    check_label(get_task(task_id), value)


@pytest.mark.parametrize(
    "task_id,value",
    [("T3", 2), ("T3", -1), ("T3", True), ("T10", [0, 1]), ("T10", [0, 2, 0, 0, 0, 0, 0, 0]), ("T16", 44), ("T16", -1)],
)
def test_check_label_rejects(task_id, value):
    from ausculta.bench_tasks import check_label, get_task
    from ausculta.errors import LabelOutOfRange

    with pytest.raises(LabelOutOfRange):
        check_label(get_task(task_id), value)


def test_fractional_count_is_non_integer():
    from ausculta.bench_tasks import check_label, get_task
    from ausculta.errors import NonIntegerCount

    with pytest.raises(NonIntegerCount):
        check_label(get_task("T16"), 2.5)


def test_validate_labels_counts_classes(fixture_manifest):
    from ausculta.bench_tasks import get_task, validate_labels
    from ausculta.corpus import load_manifest

    report = validate_labels(get_task("T13"), load_manifest(fixture_manifest))
    assert report.n_labeled == 12
    assert report.class_counts == {"Normal": 6, "Abnormal": 6}
    assert report.split_counts == {"train": 8, "validation": 4}
