"""
Manifest-driven corpus: JSON-Lines records, per-dataset validation splits, the
single-dataset batch planner used for pretraining, lazy clip/feature access and a
synthetic fixture generator for desk-scale runs without the medical datasets.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal, Optional, Sequence, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from ausculta.audio_ingest import AudioClip, ingest, read_canonical
from ausculta.augment import record_rng
from ausculta.bench_tasks import TASK_IDS, check_label, get_task
from ausculta.config import FeatureConfig, IngestConfig
from ausculta.errors import (
    BatchSizeTooSmall,
    DuplicateRecordId,
    EmptyAudio,
    LabelOutOfRange,
    ManifestError,
    MissingAudioFile,
    UnknownDatasetId,
)
from ausculta.featurize import Featurizer, LogMelSpectrogram, read_feature_cache
from ausculta.fileio import atomic_write_text, safe_name

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# dataset_id -> (display name, sound types)
DATASETS: dict[str, tuple[str, str]] = {
    "sprsound": ("SPRSound", "L"),
    "hf_lung": ("HF Lung", "L"),
    "icbhi2017": ("ICBHI 2017", "L"),
    "lung_sound": ("Lung Sound", "L"),
    "rd_tr": ("Respiratory Database@TR", "L"),
    "korean": ("Korean", "H"),
    "cinc2016": ("Cinc 2016", "H"),
    "circor2022": ("Circor 2022", "H"),
    "hsdreport": ("HSDReport", "H"),
    "xhheartsound": ("XHheartSound", "H"),
    "bowel_sound": ("Bowel Sound", "B"),
}
SYNTHETIC_PREFIX = "synth"

DEFAULT_CROP_MS = 640
SHORT_CROP_MS = 320
SHORT_CROP_DATASETS = frozenset({"korean", "bowel_sound"})

Split = Literal["train", "validation", "test"]
LabelValue = Union[int, float, list[int]]


def is_known_dataset(dataset_id: str) -> bool:
    return dataset_id in DATASETS or dataset_id.startswith(SYNTHETIC_PREFIX)


def crop_ms_for(dataset_id: str, overrides: Optional[dict[str, int]] = None) -> int:
    if overrides and dataset_id in overrides:
        return overrides[dataset_id]
    return SHORT_CROP_MS if dataset_id in SHORT_CROP_DATASETS else DEFAULT_CROP_MS


class RecordEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    v: Literal[1] = MANIFEST_VERSION
    record_id: str
    dataset_id: str
    sound_type: Literal["L", "H", "B"]
    audio_path: str
    labels: dict[str, LabelValue] = {}
    split: Split = "train"

    @field_validator("labels")
    @classmethod
    def _labels_in_range(cls, labels: dict[str, LabelValue]) -> dict[str, LabelValue]:
        for task_id, value in labels.items():
            if task_id not in TASK_IDS:
                raise ValueError(f"unknown task {task_id!r} in labels")
            try:
                check_label(get_task(task_id), value)
            except LabelOutOfRange as e:
                raise ValueError(str(e)) from e
        return labels


@dataclass(frozen=True)
class Corpus:
    records: tuple[RecordEntry, ...]
    root: Path = field(default_factory=Path.cwd)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[RecordEntry]:
        return iter(self.records)

    def get(self, record_id: str) -> RecordEntry:
        for rec in self.records:
            if rec.record_id == record_id:
                return rec
        raise KeyError(record_id)

    def datasets(self) -> list[str]:
        return sorted({r.dataset_id for r in self.records})

    def by_dataset(self, split: Optional[str] = None) -> dict[str, list[RecordEntry]]:
        out: dict[str, list[RecordEntry]] = defaultdict(list)
        for rec in self.records:
            if split is None or rec.split == split:
                out[rec.dataset_id].append(rec)
        return {k: sorted(v, key=lambda r: r.record_id) for k, v in sorted(out.items())}

    def with_split(self, split: str) -> list[RecordEntry]:
        return [r for r in self.records if r.split == split]

    def audio_path(self, rec: RecordEntry) -> Path:
        p = Path(rec.audio_path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: Path | str, strict: bool = False) -> Corpus:
    """Parse a JSONL manifest; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.resolve().parent
    records: list[RecordEntry] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = RecordEntry.model_validate(json.loads(line))
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {e.msg}") from e
            except ValidationError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
            if rec.record_id in seen:
                raise DuplicateRecordId(
                    f"{path}:{lineno}: record_id {rec.record_id!r} already defined on line {seen[rec.record_id]}"
                )
            if not is_known_dataset(rec.dataset_id):
                raise UnknownDatasetId(f"{path}:{lineno}: unknown dataset_id {rec.dataset_id!r}")
            seen[rec.record_id] = lineno
            records.append(rec)
    corpus = Corpus(records=tuple(records), root=root)
    if strict:
        for rec in corpus.records:
            if not corpus.audio_path(rec).is_file():
                raise MissingAudioFile(f"{rec.record_id}: audio not found at {corpus.audio_path(rec)}")
    logger.info("Loaded manifest %s: %d records, %d datasets", path, len(records), len(corpus.datasets()))
    return corpus


def write_manifest(path: Path | str, records: Sequence[RecordEntry]) -> Path:
    text = "".join(rec.model_dump_json() + "\n" for rec in records)
    return atomic_write_text(path, text)


def split_validation(corpus: Corpus, fraction: float = 0.10, seed: int = 0) -> Corpus:
    """
    Move ceil(fraction * n) train records of every dataset that has no predefined
    validation records into validation. Other datasets are left untouched.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    moved: set[str] = set()
    has_validation = {r.dataset_id for r in corpus.records if r.split == "validation"}
    for dataset_id, train in corpus.by_dataset(split="train").items():
        if dataset_id in has_validation:
            continue
        n_val = math.ceil(round(fraction * len(train), 9))
        if n_val == 0:
            continue
        order = record_rng(seed, dataset_id, "split").permutation(len(train))
        moved.update(train[i].record_id for i in order[:n_val])
        logger.info("Dataset %s: %d of %d records -> validation", dataset_id, n_val, len(train))
    records = tuple(
        rec.model_copy(update={"split": "validation"}) if rec.record_id in moved else rec
        for rec in corpus.records
    )
    return replace(corpus, records=records)


@dataclass(frozen=True)
class Batch:
    dataset_id: str
    record_ids: tuple[str, ...]
    crop_ms: int


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...]
    epoch: int = 0

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)


def plan_batches(
    corpus: Corpus,
    batch_size: int,
    crop_table: Optional[dict[str, int]] = None,
    seed: int = 0,
    epoch: int = 0,
) -> BatchPlan:
    """Full single-dataset batches (remainders dropped), interleaved by a seeded shuffle."""
    if batch_size < 2:
        raise BatchSizeTooSmall(f"batch_size must be >= 2 for a contrastive batch, got {batch_size}")
    batches: list[Batch] = []
    for dataset_id, train in corpus.by_dataset(split="train").items():
        order = record_rng(seed, dataset_id, "epoch", epoch).permutation(len(train))
        crop = crop_ms_for(dataset_id, crop_table)
        for start in range(0, len(order) - batch_size + 1, batch_size):
            ids = tuple(train[i].record_id for i in order[start:start + batch_size])
            batches.append(Batch(dataset_id=dataset_id, record_ids=ids, crop_ms=crop))
        dropped = len(order) % batch_size
        if dropped:
            logger.debug("Epoch %d, dataset %s: %d remainder records dropped", epoch, dataset_id, dropped)
    interleave = record_rng(seed, "interleave", epoch).permutation(len(batches))
    return BatchPlan(batches=tuple(batches[i] for i in interleave), epoch=epoch)


class RecordStore:
    """
    Canonical clips and normalized spectrograms for corpus records. Reads the ABAU / ABFT
    files written by `ausculta preprocess` when `cache_dir` holds them, otherwise ingests
    the WAV. Results are memoized per record.
    """

    def __init__(
        self,
        corpus: Corpus,
        cache_dir: Optional[Path] = None,
        ingest_cfg: IngestConfig = IngestConfig(),
        feature_cfg: FeatureConfig = FeatureConfig(),
    ):
        self.corpus = corpus
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.ingest_cfg = ingest_cfg
        self.featurizer = Featurizer(feature_cfg, sample_rate=ingest_cfg.target_rate)
        self._entries = {r.record_id: r for r in corpus.records}
        self._clips: dict[str, AudioClip] = {}
        self._specs: dict[str, LogMelSpectrogram] = {}

    def _cached(self, sub: str, record_id: str, suffix: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        p = self.cache_dir / sub / f"{safe_name(record_id)}{suffix}"
        return p if p.is_file() else None

    def clip(self, record_id: str) -> AudioClip:
        if record_id not in self._clips:
            cached = self._cached("audio", record_id, ".abau")
            if cached is not None:
                clip = read_canonical(cached, source_id=record_id)
            else:
                rec = self._entries[record_id]
                clip = ingest(self.corpus.audio_path(rec), self.ingest_cfg, source_id=record_id)
            if clip.is_empty:
                raise EmptyAudio(f"{record_id}: no audio above the silence threshold")
            self._clips[record_id] = clip
        return self._clips[record_id]

    def featurize(self, clip: AudioClip) -> LogMelSpectrogram:
        if clip.n_samples < self.featurizer.win_len:
            clip = replace(clip, samples=np.pad(clip.samples, (0, self.featurizer.win_len - clip.n_samples)))
        return self.featurizer(clip)

    def spectrogram(self, record_id: str) -> LogMelSpectrogram:
        if record_id not in self._specs:
            cached = self._cached("features", record_id, ".abft")
            if cached is not None:
                spec = read_feature_cache(cached, source_id=record_id)
            else:
                spec = self.featurize(self.clip(record_id))
            self._specs[record_id] = spec
        return self._specs[record_id]


# --- synthetic fixture ---

DEFAULT_CLASS_SPEC: tuple[float, ...] = (200.0, 900.0)


def _synth_waveform(rng: np.random.Generator, base_hz: float, duration_s: float, sample_rate: int) -> np.ndarray:
    """Harmonic tone family around `base_hz` with per-record jitter, AM and a faint noise band."""
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = base_hz * float(np.exp(rng.uniform(-0.3, 0.3)))
    am_rate = rng.uniform(1.0, 6.0)
    am_depth = rng.uniform(0.2, 0.8)
    x = np.zeros(n)
    for h, amp in enumerate(rng.uniform(0.2, 1.0, size=3), start=1):
        if f0 * h < sample_rate / 2 - 100:
            x += amp / h * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    x *= 1.0 - am_depth * 0.5 * (1 + np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
    # narrowband noise texture at a record-specific centre
    centre = rng.uniform(0.35, 0.9) * sample_rate / 2
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum *= np.exp(-0.5 * ((freqs - centre) / (0.03 * sample_rate / 2)) ** 2)
    band = np.fft.irfft(spectrum, n)
    band /= max(np.max(np.abs(band)), 1e-12)
    x = x / max(np.max(np.abs(x)), 1e-12) * 0.5 + 0.04 * band
    return np.clip(x, -0.99, 0.99)


def synth_fixture(
    out_dir: Path | str,
    n_datasets: int = 1,
    n_records: int = 16,
    class_spec: Sequence[float] = DEFAULT_CLASS_SPEC,
    seed: int = 0,
    n_validation: int = 0,
    task_id: str = "T13",
    duration_s: float = 2.0,
    sample_rate: int = 8000,
) -> Path:
    """
    Write `n_datasets` synthetic datasets of `n_records` train records (plus
    `n_validation` predefined validation records) as 16-bit WAVs and a manifest.
    Class c of `class_spec` is a tone family at class_spec[c] Hz; labels go under
    `task_id`. Returns the manifest path.
    """
    task = get_task(task_id)
    if task.task_type not in ("BC", "MC") or len(class_spec) != len(task.class_names):
        raise ValueError(
            f"class_spec has {len(class_spec)} classes; {task_id} needs {len(task.class_names)} ({task.task_type})"
        )
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    records: list[RecordEntry] = []
    for d in range(n_datasets):
        dataset_id = f"{SYNTHETIC_PREFIX}_{d}"
        for i in range(n_records + n_validation):
            record_id = f"{dataset_id}_{i:04d}"
            label = i % len(class_spec)
            rng = record_rng(seed, record_id, "synth")
            x = _synth_waveform(rng, class_spec[label], duration_s, sample_rate)
            rel = Path("audio") / f"{record_id}.wav"
            sf.write(str(out_dir / rel), x, sample_rate, subtype="PCM_16", format="WAV")
            records.append(
                RecordEntry(
                    record_id=record_id,
                    dataset_id=dataset_id,
                    sound_type=task.sound_type,
                    audio_path=rel.as_posix(),
                    labels={task_id: label},
                    split="train" if i < n_records else "validation",
                )
            )
    manifest = write_manifest(out_dir / "manifest.jsonl", records)
    logger.info("Synthetic fixture: %d records in %s", len(records), out_dir)
    return manifest
