"""
Downstream benchmarking: fixed-length chunking, linear probing on a frozen encoder or
full fine-tuning, and per-recording aggregation of segment logits.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from ausculta.audio_ingest import AudioClip
from ausculta.autograd import Tensor, binary_cross_entropy_with_logits, cross_entropy, matmul, mse
from ausculta.bench_tasks import COUNT_RANGE, TaskSpec
from ausculta.config import ProbeConfig
from ausculta.corpus import Corpus, RecordEntry, RecordStore
from ausculta.errors import DimMismatch, NoLabeledData
from ausculta.fileio import atomic_write_text
from ausculta.nn_core import (
    AdamState,
    Params,
    adam_step,
    bind,
    build_encoder,
    collect_grads,
    encode,
    encoder_params,
    lr_at_epoch,
    project,
)

logger = logging.getLogger(__name__)

Mode = Literal["linear", "full"]
EMBED_BATCH = 64


def chunk_for_task(clip: AudioClip, task: TaskSpec) -> list[np.ndarray]:
    """Consecutive chunk_s-second segments; the last one is zero-padded. Never empty."""
    length = int(round(task.chunk_s * clip.sample_rate))
    n = clip.n_samples
    n_segments = max(1, -(-n // length))
    padded = np.zeros(n_segments * length, dtype=np.float64)
    padded[:n] = clip.samples
    return [padded[i * length:(i + 1) * length] for i in range(n_segments)]


def segment_features(store: RecordStore, record_id: str, task: TaskSpec) -> np.ndarray:
    """(n_segments, n_frames, n_mels) normalized log-mel stack for one record."""
    clip = store.clip(record_id)
    specs = [
        store.featurize(AudioClip(samples=seg, sample_rate=clip.sample_rate, source_id=record_id)).values
        for seg in chunk_for_task(clip, task)
    ]
    return np.stack(specs)


def embed_segments(params: Params, segments: np.ndarray, space: str = "encoder") -> np.ndarray:
    out = np.concatenate([encode(params, segments[i:i + EMBED_BATCH]) for i in range(0, len(segments), EMBED_BATCH)])
    return project(params, out) if space == "projector" else out


@dataclass(frozen=True, eq=False)
class ProbeHead:
    task_id: str
    weight: np.ndarray  # (d_in, K)
    bias: np.ndarray  # (K,)

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[0])

    def logits(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise DimMismatch(f"{self.task_id} head expects {self.in_dim}-dim inputs, got {x.shape[-1]}")
        return x @ self.weight + self.bias

    def to_params(self) -> Params:
        return {f"probe.{self.task_id}.weight": self.weight, f"probe.{self.task_id}.bias": self.bias}

    @classmethod
    def from_params(cls, params: Params, task_id: str) -> "ProbeHead":
        return cls(
            task_id=task_id,
            weight=np.asarray(params[f"probe.{task_id}.weight"], dtype=np.float64),
            bias=np.asarray(params[f"probe.{task_id}.bias"], dtype=np.float64),
        )


def label_array(task: TaskSpec, records: Sequence[RecordEntry]) -> np.ndarray:
    values = [r.labels[task.task_id] for r in records]
    if task.task_type in ("BC", "MC"):
        return np.asarray(values, dtype=np.int64)
    return np.asarray(values, dtype=np.float64)


def head_loss(task: TaskSpec, logits: Tensor, targets: np.ndarray) -> Tensor:
    if task.task_type in ("BC", "MC"):
        return cross_entropy(logits, targets)
    if task.task_type == "ML":
        return binary_cross_entropy_with_logits(logits, targets)
    return mse(logits, targets.reshape(-1, 1))


def _init_head(task: TaskSpec, d_in: int, targets: np.ndarray) -> Params:
    bias = np.zeros(task.n_outputs)
    if task.task_type == "R" and targets.size:
        # start from the mean count
        bias[:] = float(np.mean(targets))
    return {"probe.weight": np.zeros((d_in, task.n_outputs)), "probe.bias": bias}


@dataclass
class ProbeResult:
    head: ProbeHead
    params: Params
    mode: str
    loss_history: list[float] = field(default_factory=list)


def fit_head(features: np.ndarray, targets: np.ndarray, task: TaskSpec, cfg: ProbeConfig = ProbeConfig()) -> tuple[ProbeHead, list[float]]:
    """Train a single dense layer on fixed features with Adam and per-epoch lr decay."""
    n = features.shape[0]
    if n == 0:
        raise NoLabeledData(f"{task.task_id}: no training segments")
    p = _init_head(task, features.shape[1], targets)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bound = bind(p)
            logits = matmul(Tensor(features[idx]), bound["probe.weight"]) + bound["probe.bias"]
            loss = head_loss(task, logits, targets[idx])
            loss.backward()
            adam_step(state, p, collect_grads(bound), lr)
            total += loss.item() * len(idx)
        history.append(total / n)
    logger.info("%s head: final train loss %.4f after %d epochs", task.task_id, history[-1], cfg.epochs)
    return ProbeHead(task.task_id, p["probe.weight"], p["probe.bias"]), history


def _finetune(
    params: Params, segments: np.ndarray, targets: np.ndarray, task: TaskSpec, cfg: ProbeConfig
) -> tuple[Params, ProbeHead, list[float]]:
    """Joint Adam on encoder (and projector, in projector space) plus head."""
    tuned = {k: v.copy() for k, v in params.items()}
    encoder = build_encoder(tuned)
    d_in = tuned["projector.weight"].shape[1] if cfg.space == "projector" else encoder.out_dim
    head = _init_head(task, d_in, targets)
    trainable = encoder_params(tuned)
    if cfg.space == "projector":
        trainable.update({k: tuned[k] for k in ("projector.weight", "projector.bias")})
    trainable.update(head)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    n = segments.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bound = bind(trainable)
            z = encoder.forward(bound, Tensor(segments[idx]))
            if cfg.space == "projector":
                z = matmul(z, bound["projector.weight"]) + bound["projector.bias"]
            logits = matmul(z, bound["probe.weight"]) + bound["probe.bias"]
            loss = head_loss(task, logits, targets[idx])
            loss.backward()
            adam_step(state, trainable, collect_grads(bound), lr)
            total += loss.item() * len(idx)
        history.append(total / n)
    for k in list(tuned):
        if k in trainable:
            tuned[k] = trainable[k]
    return tuned, ProbeHead(task.task_id, trainable["probe.weight"], trainable["probe.bias"]), history


def train_probe(
    params: Params,
    task: TaskSpec,
    store: RecordStore,
    mode: Mode = "linear",
    cfg: ProbeConfig = ProbeConfig(),
    records: Optional[Sequence[RecordEntry]] = None,
) -> ProbeResult:
    """
    Fit a head for `task` on the labeled train records. Linear mode never touches
    `params`; full mode returns a fine-tuned copy.
    """
    if records is None:
        records = [r for r in store.corpus.with_split("train") if task.task_id in r.labels]
    records = [r for r in records if task.task_id in r.labels]
    if not records:
        raise NoLabeledData(f"{task.task_id}: no labeled train records")
    labels = label_array(task, records)
    seg_stacks = [segment_features(store, r.record_id, task) for r in records]
    segments = np.concatenate(seg_stacks)
    targets = np.concatenate([np.repeat(labels[i:i + 1], len(s), axis=0) for i, s in enumerate(seg_stacks)])
    logger.info("%s %s probe: %d records, %d segments", task.task_id, mode, len(records), len(segments))

    if mode == "linear":
        features = embed_segments(params, segments, cfg.space)
        head, history = fit_head(features, targets, task, cfg)
        return ProbeResult(head=head, params=params, mode=mode, loss_history=history)
    if mode == "full":
        tuned, head, history = _finetune(params, segments, targets, task, cfg)
        return ProbeResult(head=head, params=tuned, mode=mode, loss_history=history)
    raise ValueError(f"unknown probe mode {mode!r}")


# --- prediction ---

@dataclass(frozen=True, eq=False)
class RecordPrediction:
    record_id: str
    task_id: str
    segment_logits: np.ndarray  # (n_segments, K)
    probs: Optional[np.ndarray] = None
    count: Optional[float] = None

    def to_json(self) -> dict:
        row: dict = {"record_id": self.record_id, "task": self.task_id}
        if self.count is not None:
            row["count"] = self.count
        else:
            row["probs"] = [float(p) for p in self.probs]
        return row


@dataclass
class PredictionSet:
    task_id: str
    predictions: list[RecordPrediction]

    def __len__(self) -> int:
        return len(self.predictions)

    def by_record(self) -> dict[str, RecordPrediction]:
        return {p.record_id: p for p in self.predictions}

    def write_jsonl(self, path: Path | str) -> Path:
        return atomic_write_text(path, "".join(json.dumps(p.to_json()) + "\n" for p in self.predictions))

    @classmethod
    def read_jsonl(cls, path: Path | str, task_id: Optional[str] = None) -> "PredictionSet":
        preds = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                if task_id is not None and row["task"] != task_id:
                    continue
                probs = np.asarray(row["probs"], dtype=np.float64) if "probs" in row else None
                preds.append(RecordPrediction(
                    record_id=row["record_id"],
                    task_id=row["task"],
                    segment_logits=np.empty((0, 0)),
                    probs=probs,
                    count=row.get("count"),
                ))
        return cls(task_id=task_id or (preds[0].task_id if preds else ""), predictions=preds)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def aggregate_logits(task: TaskSpec, segment_logits: np.ndarray) -> tuple[Optional[np.ndarray], Optional[float]]:
    """Mean over segments, then softmax (BC/MC), sigmoid (ML) or a >= 0 count (R)."""
    z = segment_logits.mean(axis=0)
    if task.task_type == "R":
        return None, max(0.0, float(z[0]))
    if task.task_type == "ML":
        return _sigmoid(z), None
    e = np.exp(z - z.max())
    return e / e.sum(), None


def predict(
    params: Params,
    head: ProbeHead,
    task: TaskSpec,
    store: RecordStore,
    record_ids: Sequence[str],
    space: str = "encoder",
) -> PredictionSet:
    if head.task_id != task.task_id:
        raise DimMismatch(f"head trained for {head.task_id}, asked to predict {task.task_id}")
    if head.weight.shape[1] != task.n_outputs:
        raise DimMismatch(f"head has {head.weight.shape[1]} outputs, {task.task_id} needs {task.n_outputs}")
    preds = []
    for record_id in record_ids:
        segments = segment_features(store, record_id, task)
        logits = head.logits(embed_segments(params, segments, space))
        probs, count = aggregate_logits(task, logits)
        preds.append(RecordPrediction(record_id, task.task_id, logits, probs=probs, count=count))
    return PredictionSet(task_id=task.task_id, predictions=preds)


def evaluation_records(corpus: Corpus, task: TaskSpec) -> list[RecordEntry]:
    """Labeled test records; the validation split stands in when there is no test split."""
    for split in ("test", "validation"):
        records = [r for r in corpus.with_split(split) if task.task_id in r.labels]
        if records:
            return records
    return []


def count_prediction(count: float) -> int:
    lo, hi = COUNT_RANGE
    return int(min(hi, max(lo, np.floor(count + 0.5))))
