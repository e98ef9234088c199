"""
Contrastive instance-discrimination pretraining.

Two independently augmented crops of one recording form a positive pair; the other
recordings' positive views in the batch are the negatives. Each anchor row of the
bilinear similarity matrix is a K-way classification over the batch's positive pool.
"""
from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ausculta.augment import loudness_scale, random_crop, record_rng, spec_augment
from ausculta.autograd import Tensor, cross_entropy
from ausculta.config import AugmentConfig, PretrainConfig
from ausculta.corpus import Batch, Corpus, RecordStore, crop_ms_for, load_manifest, plan_batches, split_validation
from ausculta.errors import DataError, NonFiniteLoss, NumericError
from ausculta.fileio import atomic_write_text
from ausculta.nn_core import (
    AdamState,
    ContrastiveModel,
    Params,
    adam_step,
    bind,
    collect_grads,
    lr_at_epoch,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

ALL_DATASETS = "all"


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    anchors: np.ndarray  # (N, crop_frames, n_mels)
    positives: np.ndarray
    record_ids: tuple[str, ...]
    dataset_id: str
    crop_ms: int
    anchor_offsets: tuple[int, ...] = ()
    positive_offsets: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.record_ids)


def make_pairs(
    batch: Batch,
    store: RecordStore,
    aug: AugmentConfig = AugmentConfig(),
    seed: int = 0,
    epoch: int = 0,
) -> ContrastiveBatch:
    """Two independent loudness-scaled, cropped and masked views per record."""
    seed = aug.seed if aug.seed is not None else seed
    views: list[list[np.ndarray]] = [[], []]
    offsets: list[list[int]] = [[], []]
    for record_id in batch.record_ids:
        rng = record_rng(seed, record_id, "pairs", epoch)
        clip = store.clip(record_id)
        for v in range(2):
            spec = store.featurize(loudness_scale(clip, rng, aug.loudness_range))
            crop = random_crop(spec, batch.crop_ms, rng)
            crop = spec_augment(crop, aug.spec_aug, rng)
            views[v].append(crop.values)
            offsets[v].append(crop.offset)
    return ContrastiveBatch(
        anchors=np.stack(views[0]),
        positives=np.stack(views[1]),
        record_ids=tuple(batch.record_ids),
        dataset_id=batch.dataset_id,
        crop_ms=batch.crop_ms,
        anchor_offsets=tuple(offsets[0]),
        positive_offsets=tuple(offsets[1]),
    )


def fixed_pairs(record_ids: Sequence[str], dataset_id: str, store: RecordStore, crop_ms: int, seed: int) -> ContrastiveBatch:
    """Un-augmented crops at offsets fixed by (seed, record_id), for validation."""
    anchors, positives, a_off, p_off = [], [], [], []
    for record_id in record_ids:
        rng = record_rng(seed, record_id, "validation")
        spec = store.spectrogram(record_id)
        a = random_crop(spec, crop_ms, rng)
        p = random_crop(spec, crop_ms, rng)
        anchors.append(a.values)
        positives.append(p.values)
        a_off.append(a.offset)
        p_off.append(p.offset)
    return ContrastiveBatch(
        anchors=np.stack(anchors),
        positives=np.stack(positives),
        record_ids=tuple(record_ids),
        dataset_id=dataset_id,
        crop_ms=crop_ms,
        anchor_offsets=tuple(a_off),
        positive_offsets=tuple(p_off),
    )


def instance_accuracy(sims: np.ndarray) -> float:
    """Fraction of rows whose diagonal entry is the strict row maximum."""
    s = np.asarray(sims, dtype=np.float64)
    off = s.copy()
    np.fill_diagonal(off, -np.inf)
    return float(np.mean(np.diag(s) > off.max(axis=1)))


def contrastive_loss(sims: np.ndarray) -> tuple[float, float]:
    """
    Mean over rows i of -log softmax(sims[i])[i], computed with max-subtracted
    log-sum-exp in float64. Returns (loss, accuracy).
    """
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 2:
        raise DataError(f"similarity matrix must be N x N with N >= 2, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteLoss("non-finite similarities")
    m = s.max(axis=1)
    lse = m + np.log(np.exp(s - m[:, None]).sum(axis=1))
    loss = float(np.mean(lse - np.diag(s)))
    if not np.isfinite(loss):
        raise NonFiniteLoss("non-finite contrastive loss")
    return loss, instance_accuracy(s)


def batch_loss(model: ContrastiveModel, bound: dict[str, Tensor], pairs: ContrastiveBatch) -> tuple[Tensor, np.ndarray]:
    sims = model.similarity(bound, Tensor(pairs.anchors), Tensor(pairs.positives))
    loss = cross_entropy(sims, np.arange(len(pairs)))
    return loss, sims.data


def train_step(model: ContrastiveModel, params: Params, state: AdamState, pairs: ContrastiveBatch, lr: float) -> tuple[float, float]:
    bound = bind(params)
    loss, sims = batch_loss(model, bound, pairs)
    if not np.isfinite(loss.item()):
        raise NonFiniteLoss("non-finite contrastive loss")
    loss.backward()
    adam_step(state, params, collect_grads(bound), lr)
    return loss.item(), instance_accuracy(sims)


def evaluate_pairs(model: ContrastiveModel, params: Params, pairs: ContrastiveBatch) -> tuple[float, float]:
    sims = model.similarity(bind(params, requires_grad=False), Tensor(pairs.anchors), Tensor(pairs.positives))
    return contrastive_loss(sims.data)


@dataclass
class StepRecord:
    epoch: int
    step: int
    dataset_id: str
    loss: float
    accuracy: float
    lr: float


@dataclass
class EpochRecord:
    epoch: int
    split: str
    dataset_id: str
    loss: float
    accuracy: float


@dataclass
class TrainingLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def rows(self, split: str, dataset_id: str = ALL_DATASETS) -> list[EpochRecord]:
        return [r for r in self.epochs if r.split == split and r.dataset_id == dataset_id]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "split", "dataset_id", "loss", "accuracy"])
        for r in self.epochs:
            writer.writerow([r.epoch, r.split, r.dataset_id, repr(r.loss), repr(r.accuracy)])
        return buf.getvalue()

    def steps_to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "step", "dataset_id", "loss", "accuracy", "lr"])
        for r in self.steps:
            writer.writerow([r.epoch, r.step, r.dataset_id, repr(r.loss), repr(r.accuracy), repr(r.lr)])
        return buf.getvalue()

    def write_csv(self, path: Path | str) -> Path:
        return atomic_write_text(path, self.to_csv())

    def write_steps_csv(self, path: Path | str) -> Path:
        return atomic_write_text(path, self.steps_to_csv())


def _weighted_rows(epoch: int, split: str, results: Iterable[tuple[str, int, float, float]]) -> list[EpochRecord]:
    """(dataset_id, n, loss, acc) per batch -> one row per dataset plus the combined row."""
    per: dict[str, list[tuple[int, float, float]]] = {}
    for dataset_id, n, loss, acc in results:
        per.setdefault(dataset_id, []).append((n, loss, acc))
    rows = []
    everything: list[tuple[int, float, float]] = []
    for dataset_id in sorted(per):
        items = per[dataset_id]
        everything.extend(items)
        w = np.array([n for n, _, _ in items], dtype=np.float64)
        rows.append(EpochRecord(
            epoch, split, dataset_id,
            float(np.average([l for _, l, _ in items], weights=w)),
            float(np.average([a for _, _, a in items], weights=w)),
        ))
    if everything:
        w = np.array([n for n, _, _ in everything], dtype=np.float64)
        rows.append(EpochRecord(
            epoch, split, ALL_DATASETS,
            float(np.average([l for _, l, _ in everything], weights=w)),
            float(np.average([a for _, _, a in everything], weights=w)),
        ))
    return rows


def validation_batches(corpus: Corpus, store: RecordStore, cfg: PretrainConfig) -> list[ContrastiveBatch]:
    """Validation records per dataset in chunks of batch_size; a short tail joins the previous chunk."""
    out = []
    for dataset_id, records in corpus.by_dataset(split="validation").items():
        ids = [r.record_id for r in records]
        if len(ids) < 2:
            logger.warning("Dataset %s has %d validation record(s); skipped in validation", dataset_id, len(ids))
            continue
        chunks = [ids[i:i + cfg.batch_size] for i in range(0, len(ids), cfg.batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            chunks[-2].extend(chunks.pop())
        crop = crop_ms_for(dataset_id, cfg.crop_table)
        out.extend(fixed_pairs(chunk, dataset_id, store, crop, cfg.seed) for chunk in chunks)
    return out


@dataclass
class PretrainResult:
    params: Params
    log: TrainingLog
    best_epoch: int
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None


def run_pretraining(cfg: PretrainConfig, corpus: Optional[Corpus] = None, write: bool = True) -> PretrainResult:
    """
    Train for cfg.epochs with lr_t = lr * lr_decay**epoch, validating after every epoch
    and keeping the parameters with the lowest combined validation loss (training loss
    when the corpus has no validation records).
    """
    corpus = corpus if corpus is not None else load_manifest(cfg.corpus)
    corpus = split_validation(corpus, cfg.validation_fraction, cfg.seed)
    store = RecordStore(corpus, cfg.cache_dir, cfg.ingest, cfg.features)
    model = ContrastiveModel(cfg.dims, n_mels=cfg.features.n_mels)
    params = model.init(cfg.seed)
    state = AdamState()
    val_sets = validation_batches(corpus, store, cfg)
    log = TrainingLog()

    best_loss = np.inf
    best_params = copy.deepcopy(params)
    best_epoch = 0
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        plan = plan_batches(corpus, cfg.batch_size, cfg.crop_table, cfg.seed, epoch)
        if len(plan) == 0:
            raise DataError(f"no dataset has a full batch of {cfg.batch_size} train records")
        train_results = []
        for index, batch in enumerate(plan):
            pairs = make_pairs(batch, store, cfg.augment, cfg.seed, epoch)
            try:
                loss, acc = train_step(model, params, state, pairs, lr)
            except NumericError as e:
                raise type(e)(
                    f"epoch {epoch} batch {index} ({batch.dataset_id}: {', '.join(batch.record_ids)}): {e}"
                ) from e
            log.steps.append(StepRecord(epoch, step, batch.dataset_id, loss, acc, lr))
            logger.debug("epoch %d step %d %s loss=%.4f acc=%.3f", epoch, step, batch.dataset_id, loss, acc)
            train_results.append((batch.dataset_id, len(pairs), loss, acc))
            step += 1
        log.epochs.extend(_weighted_rows(epoch, "train", train_results))

        val_results = [(p.dataset_id, len(p), *evaluate_pairs(model, params, p)) for p in val_sets]
        val_rows = _weighted_rows(epoch, "validation", val_results)
        log.epochs.extend(val_rows)

        monitor = val_rows[-1] if val_rows else log.rows("train")[-1]
        if monitor.loss < best_loss:
            best_loss, best_epoch = monitor.loss, epoch
            best_params = copy.deepcopy(params)
        logger.info(
            "Epoch %d/%d lr=%.3g train_loss=%.4f %s_loss=%.4f %s_acc=%.3f",
            epoch + 1, cfg.epochs, lr, log.rows("train")[-1].loss,
            monitor.split, monitor.loss, monitor.split, monitor.accuracy,
        )

    result = PretrainResult(params=best_params, log=log, best_epoch=best_epoch)
    if write:
        out = Path(cfg.out_dir)
        result.checkpoint_path = save_checkpoint(out / "checkpoint.abcp", best_params)
        result.log_path = log.write_csv(out / "training_log.csv")
        log.write_steps_csv(out / "training_steps.csv")
    logger.info("Best epoch %d (loss %.4f)", best_epoch, best_loss)
    return result


@dataclass(frozen=True, eq=False)
class EmbeddingRow:
    record_id: str
    dataset_id: str
    crop_idx: int
    vector: np.ndarray


def select_export_records(corpus: Corpus, per_dataset: int = 5) -> list[str]:
    """First `per_dataset` validation records of each dataset (train records when a dataset has none)."""
    chosen = []
    val = corpus.by_dataset(split="validation")
    for dataset_id, records in corpus.by_dataset().items():
        pool = val.get(dataset_id) or records
        chosen.extend(r.record_id for r in pool[:per_dataset])
    return chosen


def export_embeddings(
    params: Params,
    store: RecordStore,
    record_ids: Sequence[str],
    n_crops: int = 8,
    seed: int = 0,
    crop_table: Optional[dict[str, int]] = None,
) -> list[EmbeddingRow]:
    """Projector-space embeddings of `n_crops` random crops per record."""
    model = ContrastiveModel.from_params(params)
    bound = bind(params, requires_grad=False)
    rows: list[EmbeddingRow] = []
    for record_id in record_ids:
        rec = store.corpus.get(record_id)
        crop_ms = crop_ms_for(rec.dataset_id, crop_table)
        spec = store.spectrogram(record_id)
        rng = record_rng(seed, record_id, "export")
        crops = np.stack([random_crop(spec, crop_ms, rng).values for _ in range(n_crops)])
        z = model.embed(bound, Tensor(crops)).data
        rows.extend(EmbeddingRow(record_id, rec.dataset_id, i, z[i].copy()) for i in range(n_crops))
    return rows


def write_embeddings_csv(path: Path | str, rows: Sequence[EmbeddingRow]) -> Path:
    dim = rows[0].vector.shape[0] if rows else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record_id", "dataset_id", "crop_idx"] + [f"z{i}" for i in range(dim)])
    for r in rows:
        writer.writerow([r.record_id, r.dataset_id, r.crop_idx] + [repr(float(x)) for x in r.vector])
    return atomic_write_text(path, buf.getvalue())
