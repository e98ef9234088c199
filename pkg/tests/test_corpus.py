"""
Tests for ausculta.corpus: manifest validation, validation splits, single-dataset batch
planning, the record store cache path and the synthetic fixture.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import soundfile as sf

COUNT_MAX = 43


def _entry(record_id: str, dataset_id: str = "icbhi2017", **kw) -> dict:
    row = {"v": 1, "record_id": record_id, "dataset_id": dataset_id, "sound_type": "L", "audio_path": f"{record_id}.wav"}
    row.update(kw)
    return row


def _write_manifest(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def _corpus(counts: dict[str, int]):
    from ausculta.corpus import Corpus, RecordEntry

    records = []
    for dataset_id, n in counts.items():
        sound = "H" if dataset_id in ("korean", "cinc2016") else ("B" if dataset_id == "bowel_sound" else "L")
        records += [
            RecordEntry(record_id=f"{dataset_id}_{i:03d}", dataset_id=dataset_id, sound_type=sound, audio_path="x.wav")
            for i in range(n)
        ]
    return Corpus(records=tuple(records))


# --- load_manifest ---

def test_load_manifest_three_records(tmp_path):
    from ausculta.corpus import load_manifest

    path = _write_manifest(tmp_path / "m.jsonl", [_entry("a"), _entry("b", labels={"T6": 2}), _entry("c", split="test")])
    corpus = load_manifest(path)
    assert len(corpus) == 3
    assert corpus.get("b").labels == {"T6": 2}
    assert corpus.audio_path(corpus.get("a")) == tmp_path / "a.wav"


def test_load_manifest_duplicate_id(tmp_path):
    from ausculta.corpus import load_manifest
    from ausculta.errors import DuplicateRecordId

    path = _write_manifest(tmp_path / "m.jsonl", [_entry("a"), _entry("a")])
    with pytest.raises(DuplicateRecordId, match=":2:"):
        load_manifest(path)


def test_load_manifest_rejects_count_44(tmp_path):
    from ausculta.corpus import load_manifest
    from ausculta.errors import ManifestError

    path = _write_manifest(tmp_path / "m.jsonl", [_entry("b1", "bowel_sound", sound_type="B", labels={"T16": COUNT_MAX + 1})])
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_manifest_accepts_count_43(tmp_path):
    from ausculta.corpus import load_manifest

    path = _write_manifest(tmp_path / "m.jsonl", [_entry("b1", "bowel_sound", sound_type="B", labels={"T16": COUNT_MAX})])
    assert load_manifest(path).get("b1").labels["T16"] == COUNT_MAX


def test_load_manifest_unknown_dataset(tmp_path):
    from ausculta.corpus import load_manifest
    from ausculta.errors import UnknownDatasetId

    path = _write_manifest(tmp_path / "m.jsonl", [_entry("a", "not_a_dataset")])
    with pytest.raises(UnknownDatasetId):
        load_manifest(path)


def test_load_manifest_strict_missing_audio(tmp_path):
    from ausculta.corpus import load_manifest
    from ausculta.errors import MissingAudioFile

    path = _write_manifest(tmp_path / "m.jsonl", [_entry("a")])
    assert len(load_manifest(path)) == 1
    with pytest.raises(MissingAudioFile):
        load_manifest(path, strict=True)


def test_load_manifest_bad_json_reports_line(tmp_path):
    from ausculta.corpus import load_manifest
    from ausculta.errors import ManifestError

    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(_entry("a")) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(path)


# --- split_validation ---

def test_split_validation_ten_percent():
    from ausculta.corpus import split_validation

    out = split_validation(_corpus({"icbhi2017": 100}), 0.1, seed=3)
    assert len(out.with_split("validation")) == 10
    assert len(out.with_split("train")) == 90


def test_split_validation_rounds_up_and_is_deterministic():
    from ausculta.corpus import split_validation

    corpus = _corpus({"icbhi2017": 15, "hf_lung": 7})
    a = split_validation(corpus, 0.1, seed=1)
    b = split_validation(corpus, 0.1, seed=1)
    by = a.by_dataset(split="validation")
    assert len(by["icbhi2017"]) == 2
    assert len(by["hf_lung"]) == 1
    assert [r.split for r in a.records] == [r.split for r in b.records]


def test_split_validation_keeps_predefined_split():
    from ausculta.corpus import Corpus, split_validation

    base = _corpus({"icbhi2017": 10})
    records = tuple(r.model_copy(update={"split": "validation"}) if i < 3 else r for i, r in enumerate(base.records))
    corpus = Corpus(records=records)
    assert split_validation(corpus, 0.1, seed=0).records == corpus.records


# --- plan_batches ---

def test_plan_batches_drops_remainder():
    from ausculta.corpus import plan_batches

    plan = plan_batches(_corpus({"icbhi2017": 10}), batch_size=4, seed=0)
    assert len(plan) == 2
    assert sum(len(b.record_ids) for b in plan) == 8


def test_plan_batches_never_mixes_datasets():
    from ausculta.corpus import plan_batches

    corpus = _corpus({"icbhi2017": 13, "korean": 9, "bowel_sound": 6, "cinc2016": 11})
    for epoch in range(3):
        plan = plan_batches(corpus, batch_size=3, seed=5, epoch=epoch)
        for batch in plan:
            assert {rid.rsplit("_", 1)[0] for rid in batch.record_ids} == {batch.dataset_id}


def test_plan_batches_crop_table():
    from ausculta.corpus import plan_batches

    plan = plan_batches(_corpus({"korean": 4, "icbhi2017": 4, "bowel_sound": 4}), batch_size=2, seed=0)
    crops = {b.dataset_id: b.crop_ms for b in plan}
    assert crops == {"korean": 320, "bowel_sound": 320, "icbhi2017": 640}
    override = plan_batches(_corpus({"korean": 4}), batch_size=2, crop_table={"korean": 480})
    assert {b.crop_ms for b in override} == {480}


def test_plan_batches_seeded_and_reshuffled_per_epoch():
    from ausculta.corpus import plan_batches

    corpus = _corpus({"icbhi2017": 20, "hf_lung": 20})
    a = plan_batches(corpus, 4, seed=2, epoch=0)
    b = plan_batches(corpus, 4, seed=2, epoch=0)
    c = plan_batches(corpus, 4, seed=2, epoch=1)
    assert a.batches == b.batches
    assert a.batches != c.batches


def test_plan_batches_only_uses_train_records():
    from ausculta.corpus import plan_batches, split_validation

    corpus = split_validation(_corpus({"icbhi2017": 20}), 0.1, seed=0)
    val = {r.record_id for r in corpus.with_split("validation")}
    planned = {rid for b in plan_batches(corpus, 3) for rid in b.record_ids}
    assert planned.isdisjoint(val)


@pytest.mark.parametrize("batch_size", [0, 1])
def test_plan_batches_batch_too_small(batch_size):
    from ausculta.corpus import plan_batches
    from ausculta.errors import BatchSizeTooSmall

    with pytest.raises(BatchSizeTooSmall):
        plan_batches(_corpus({"icbhi2017": 4}), batch_size)


# --- synth_fixture / RecordStore ---

def _centroid(path: Path) -> float:
    x, sr = sf.read(str(path))
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / sr)
    return float((power * freqs).sum() / power.sum())


def test_fixture_spectral_centroid_separates_classes(fixture_manifest):
    from ausculta.corpus import load_manifest

    corpus = load_manifest(fixture_manifest)
    by_class: dict[int, list[float]] = {0: [], 1: []}
    for rec in corpus:
        by_class[rec.labels["T13"]].append(_centroid(corpus.audio_path(rec)))
    assert by_class[0] and by_class[1]
    assert max(by_class[0]) < min(by_class[1])


def test_fixture_layout(fixture_manifest):
    from ausculta.corpus import load_manifest

    corpus = load_manifest(fixture_manifest, strict=True)
    assert len(corpus) == 12
    assert len(corpus.with_split("validation")) == 4
    assert corpus.datasets() == ["synth_0"]


def test_fixture_is_byte_identical(tmp_path):
    from ausculta.corpus import synth_fixture

    a = synth_fixture(tmp_path / "a", n_records=4, seed=9, duration_s=0.5)
    b = synth_fixture(tmp_path / "b", n_records=4, seed=9, duration_s=0.5)
    assert a.read_bytes() == b.read_bytes()
    for wav in sorted((tmp_path / "a" / "audio").iterdir()):
        assert wav.read_bytes() == (tmp_path / "b" / "audio" / wav.name).read_bytes()


def test_fixture_zero_records(tmp_path):
    from ausculta.corpus import load_manifest, synth_fixture

    path = synth_fixture(tmp_path, n_records=0)
    assert path.read_text(encoding="utf-8") == ""
    assert len(load_manifest(path)) == 0


def test_record_store_reads_cache(tmp_path, fixture_manifest):
    from ausculta.corpus import RecordStore, load_manifest
    from ausculta.featurize import LogMelSpectrogram, write_feature_cache

    corpus = load_manifest(fixture_manifest)
    rid = corpus.records[0].record_id
    marker = LogMelSpectrogram(np.full((5, 64), 0.25))
    write_feature_cache(tmp_path / "features" / f"{rid}.abft", marker)
    cached = RecordStore(corpus, cache_dir=tmp_path).spectrogram(rid)
    assert cached.values.shape == (5, 64)
    fresh = RecordStore(corpus).spectrogram(rid)
    assert fresh.n_mels == 64
    assert fresh.values.max() == 1.0
