"""
Command-line surface: `ausculta preprocess | pretrain | probe | eval | rank | tasks | fixture`.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure. argparse usage
errors keep argparse's own status. Every artifact directory gets one run_manifest.json.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ausculta import __version__, config
from ausculta.errors import AuscultaError, ConfigError, DataError, EmptyAudio

logger = logging.getLogger(__name__)

PUBLISHED_SCORES = Path(__file__).resolve().parent / "data" / "published_scores.json"
METRICS = ("macro_f1", "micro_f1", "auroc", "accuracy", "accuracy_pm1")


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _print_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    cells = [[str(h) for h in header]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


# --- preprocess ---

def _preprocess_record(rec, corpus, out: Path, ingest_cfg, store) -> Optional[str]:
    from ausculta.audio_ingest import ingest, write_canonical
    from ausculta.featurize import write_feature_cache
    from ausculta.fileio import safe_name

    clip = ingest(corpus.audio_path(rec), ingest_cfg, source_id=rec.record_id)
    if clip.is_empty:
        raise EmptyAudio(f"{rec.record_id}: no audio above the silence threshold")
    spec = store.featurize(clip)
    name = safe_name(rec.record_id)
    write_canonical(out / "audio" / f"{name}.abau", clip)
    write_feature_cache(out / "features" / f"{name}.abft", spec)
    return rec.record_id


def cmd_preprocess(args: argparse.Namespace) -> int:
    from ausculta.config import FeatureConfig, IngestConfig, load_pretrain_config
    from ausculta.corpus import RecordStore, load_manifest, write_manifest
    from ausculta.report import RunClock, write_run_manifest

    clock = RunClock()
    strict = args.strict or config.strict_default()
    ingest_cfg, feature_cfg = IngestConfig(), FeatureConfig()
    if args.config:
        cfg = load_pretrain_config(args.config)
        ingest_cfg, feature_cfg = cfg.ingest, cfg.features
    corpus = load_manifest(args.manifest, strict=strict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = RecordStore(corpus, None, ingest_cfg, feature_cfg)

    def work(rec):
        try:
            return _preprocess_record(rec, corpus, out, ingest_cfg, store)
        except EmptyAudio as e:
            if strict:
                raise
            logger.warning("Skipping %s: %s", rec.record_id, e)
        except DataError as e:
            if strict:
                raise type(e)(f"{rec.record_id}: {e}") from e
            logger.error("Skipping %s", rec.record_id, exc_info=True)
        return None

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        done = list(pool.map(work, corpus.records))
    kept = {rid for rid in done if rid is not None}

    # audio paths stay valid relative to the new manifest's directory
    records = [
        rec.model_copy(update={"audio_path": Path(os.path.relpath(corpus.audio_path(rec).resolve(), out.resolve())).as_posix()})
        for rec in corpus.records
        if rec.record_id in kept
    ]
    manifest = write_manifest(out / "manifest.jsonl", records)
    logger.info("Preprocessed %d of %d records into %s", len(records), len(corpus), out)
    write_run_manifest(out, "preprocess", clock, inputs=[args.manifest], outputs=[manifest])
    print(f"{len(records)} of {len(corpus)} records preprocessed -> {manifest}")
    return 0


# --- pretrain ---

def cmd_pretrain(args: argparse.Namespace) -> int:
    from ausculta.config import config_hash, load_pretrain_config
    from ausculta.corpus import RecordStore, load_manifest, split_validation
    from ausculta.pretrain import export_embeddings, run_pretraining, select_export_records, write_embeddings_csv
    from ausculta.report import RunClock, training_curves, write_run_manifest

    clock = RunClock()
    cfg = load_pretrain_config(args.config, seed=args.seed)
    if args.out:
        cfg = cfg.model_copy(update={"out_dir": Path(args.out)})
    corpus = split_validation(load_manifest(cfg.corpus), cfg.validation_fraction, cfg.seed)
    result = run_pretraining(cfg, corpus)
    out = Path(cfg.out_dir)
    outputs = [result.checkpoint_path, result.log_path, out / "training_steps.csv"]
    outputs.append(training_curves(result.log, out / "training_curves.svg"))
    if args.export_records > 0:
        store = RecordStore(corpus, cfg.cache_dir, cfg.ingest, cfg.features)
        rows = export_embeddings(
            result.params, store, select_export_records(corpus, args.export_records),
            n_crops=args.export_crops, seed=cfg.seed, crop_table=cfg.crop_table,
        )
        outputs.append(write_embeddings_csv(out / "embeddings.csv", rows))
    write_run_manifest(out, "pretrain", clock, inputs=[args.config, cfg.corpus], outputs=outputs,
                       config_hash=config_hash(cfg), seeds=[cfg.seed])
    final = result.log.rows("validation") or result.log.rows("train")
    print(f"checkpoint: {result.checkpoint_path} (best epoch {result.best_epoch}, "
          f"{final[-1].split} loss {final[-1].loss:.4f}, acc {final[-1].accuracy:.3f})")
    return 0


# --- probe / eval ---

def _labels_for(corpus, task_id: str, records=None) -> dict:
    return {r.record_id: r.labels[task_id] for r in (records or corpus.records) if task_id in r.labels}


def _seed_summary(task_id: str, per_seed: list) -> list:
    """Mean and population std per metric across seeds; class-wise F1 averaged elementwise."""
    from ausculta.metrics import EvalResult

    by_metric: dict[str, list] = {}
    for results in per_seed:
        for r in results:
            by_metric.setdefault(r.metric, []).append(r)
    summary = []
    for metric, rs in by_metric.items():
        values = np.array([r.value for r in rs])
        per_class = None
        if all(r.per_class is not None for r in rs):
            per_class = [float(v) for v in np.mean([r.per_class for r in rs], axis=0)]
        summary.append(EvalResult(task_id=task_id, metric=metric, value=float(values.mean()), per_class=per_class, n_eval=rs[0].n_eval))
        summary.append(EvalResult(task_id=task_id, metric=f"{metric}_std", value=float(values.std()), n_eval=rs[0].n_eval))
    return summary


def cmd_probe(args: argparse.Namespace) -> int:
    from ausculta.bench_tasks import get_task
    from ausculta.config import FeatureConfig, IngestConfig, ProbeConfig, load_pretrain_config
    from ausculta.corpus import RecordStore, load_manifest
    from ausculta.errors import EmptyEvaluation
    from ausculta.fileio import atomic_write_text, sha256_file
    from ausculta.metrics import evaluate_task, update_scores
    from ausculta.nn_core import check_feature_bands, load_checkpoint, save_checkpoint
    from ausculta.probe import evaluation_records, predict, train_probe
    from ausculta.report import RunClock, write_run_manifest

    clock = RunClock()
    task = get_task(args.task)
    params = load_checkpoint(args.ckpt)
    ckpt_digest = sha256_file(args.ckpt)
    ingest_cfg, feature_cfg, cache_dir = IngestConfig(), FeatureConfig(), args.cache_dir
    if args.config:
        # features must match the ones the checkpoint was pretrained on
        cfg = load_pretrain_config(args.config)
        ingest_cfg, feature_cfg = cfg.ingest, cfg.features
        cache_dir = cache_dir or cfg.cache_dir
    check_feature_bands(params, feature_cfg.n_mels)
    corpus = load_manifest(args.manifest)
    store = RecordStore(corpus, cache_dir, ingest_cfg, feature_cfg)
    eval_records = evaluation_records(corpus, task)
    if not eval_records:
        raise EmptyEvaluation(f"{task.task_id}: no labeled test or validation records")
    labels = _labels_for(corpus, task.task_id, eval_records)
    base_seed = args.seed if args.seed is not None else (config.seed_override() or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    outputs, per_seed, seeds = [], [], [base_seed + i for i in range(args.seeds)]
    for seed in seeds:
        cfg = ProbeConfig(epochs=args.epochs, lr=args.lr, lr_decay=args.lr_decay,
                          batch_size=args.batch_size, space=args.space, seed=seed)
        result = train_probe(params, task, store, mode=args.mode, cfg=cfg)
        preds = predict(result.params, result.head, task, store, [r.record_id for r in eval_records], cfg.space)
        outputs.append(preds.write_jsonl(out / f"predictions_{task.task_id}_seed{seed}.jsonl"))
        if args.mode == "full":
            outputs.append(save_checkpoint(out / f"finetuned_{task.task_id}_seed{seed}.abcp", result.params))
        per_seed.append(evaluate_task(task, preds, labels))
    if sha256_file(args.ckpt) != ckpt_digest:
        raise DataError(f"input checkpoint {args.ckpt} changed during probing")

    summary = _seed_summary(task.task_id, per_seed)
    rows = []
    for r in summary:
        if r.metric.endswith("_std"):
            continue
        std = next(s.value for s in summary if s.metric == f"{r.metric}_std")
        rows.append((task.task_id, r.metric, r.value, std, len(seeds), r.n_eval))
    header = ("task", "metric", "mean", "std", "n_seeds", "n_eval")
    csv_text = ",".join(header) + "\n" + "".join(
        f"{t},{m},{mean!r},{std!r},{n},{k}\n" for t, m, mean, std, n, k in rows
    )
    outputs.append(atomic_write_text(out / f"probe_{task.task_id}.csv", csv_text))
    if args.scores:
        update_scores(args.scores, args.model_name, summary, f1_scale=100.0 if args.percent else 1.0)
        outputs.append(Path(args.scores))
    write_run_manifest(out, f"probe {task.task_id} --mode {args.mode}", clock, inputs=[args.ckpt, args.manifest],
                       outputs=outputs, config_hash=ckpt_digest, seeds=seeds)
    _print_table(header, rows)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from ausculta.bench_tasks import get_task
    from ausculta.corpus import load_manifest
    from ausculta.metrics import evaluate_task, update_scores
    from ausculta.probe import PredictionSet

    task = get_task(args.task)
    preds = PredictionSet.read_jsonl(args.predictions, task_id=task.task_id)
    labels = _labels_for(load_manifest(args.manifest), task.task_id)
    results = evaluate_task(task, preds, labels)
    if args.scores:
        update_scores(args.scores, args.model_name, results, f1_scale=100.0 if args.percent else 1.0)
    _print_table(("task", "metric", "value", "n_eval"), [(r.task_id, r.metric, r.value, r.n_eval) for r in results])
    return 0


# --- rank ---

def cmd_rank(args: argparse.Namespace) -> int:
    from ausculta.rank_aggregate import ScoreTable, build_rank_report, classwise_matrix, load_scores
    from ausculta.report import RunClock, radar_chart, render_rank_charts, write_run_manifest

    clock = RunClock()
    doc = load_scores(args.scores)
    out = Path(args.out)
    models = args.models.split(",") if args.models else None
    outputs = []
    if args.classwise:
        names, classes, matrix = classwise_matrix(doc, args.classwise, models)
        outputs.append(radar_chart(classes, dict(zip(names, matrix.tolist())), out / f"classwise_{args.classwise}.svg",
                                   title=f"{args.classwise} class-wise F1 (normalized)"))
        _print_table(("model", *classes), [(n, *row) for n, row in zip(names, matrix.tolist())])
    else:
        tasks = args.tasks.split(",") if args.tasks else None
        table = ScoreTable.from_scores(doc, args.metric, tasks=tasks, models=models, drop_incomplete=args.drop_incomplete)
        report = build_rank_report(table, args.group)
        outputs.extend(report.write(out))
        if not args.no_charts:
            outputs.extend(render_rank_charts(report, out))
        _print_table(("group", *report.models), [(g, *(v[m] for m in report.models)) for g, v in report.groups.items()])
        print("best: " + ", ".join(f"{m}={n}" for m, n in report.best_counts.items()))
    write_run_manifest(out, "rank", clock, inputs=[args.scores], outputs=outputs)
    return 0


# --- tasks / fixture ---

def cmd_tasks(args: argparse.Namespace) -> int:
    from ausculta.bench_tasks import builtin_registry, registry_json

    if args.json:
        print(registry_json())
        return 0
    rows = [(t.task_id, t.name, t.sound_type, t.task_type, len(t.class_names), t.function_group)
            for t in builtin_registry()]
    _print_table(("id", "name", "sound", "type", "classes", "function"), rows)
    return 0


def cmd_fixture(args: argparse.Namespace) -> int:
    from ausculta.corpus import synth_fixture
    from ausculta.fileio import atomic_write_text

    out = Path(args.out)
    manifest = synth_fixture(
        out, n_datasets=args.datasets, n_records=args.records, seed=args.seed,
        n_validation=args.validation, duration_s=args.duration, sample_rate=args.sample_rate,
    )
    fixture_cfg = {
        "corpus": manifest.name,
        "out_dir": "runs/pretrain",
        "batch_size": 4,
        "epochs": args.epochs,
        "lr": 1e-3,
        "seed": args.seed,
        "dims": {"encoder": "conv", "d_e": 32, "d_p": 16, "channels": [4, 8]},
    }
    cfg_path = atomic_write_text(out / "pretrain_config.json", json.dumps(fixture_cfg, indent=2) + "\n")
    print(f"manifest: {manifest}\nconfig: {cfg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from ausculta.bench_tasks import TASK_IDS
    from ausculta.rank_aggregate import GROUPINGS

    parser = argparse.ArgumentParser(prog="ausculta", description="Body-sound foundation model toolkit at desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help=f"Logging level (default: {config.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="Ingest and featurize every manifest record")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None, help="Training config whose ingest/features sections apply")
    p.add_argument("--strict", action="store_true", help="Fail on the first bad record (default: AUSCULTA_STRICT)")
    p.add_argument("--jobs", type=int, default=config.DEFAULT_JOBS, help=f"Worker bound (default: {config.DEFAULT_JOBS})")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="Contrastive pretraining from a training config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None, help="Overrides AUSCULTA_SEED and the config seed")
    p.add_argument("--out", type=Path, default=None, help="Overrides the config out_dir")
    p.add_argument("--export-records", type=int, default=5, help="Validation records per dataset in embeddings.csv (0 = skip)")
    p.add_argument("--export-crops", type=int, default=8)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="Linear probe or fine-tune a checkpoint on one task")
    p.add_argument("--task", required=True, choices=TASK_IDS)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cache-dir", type=Path, default=None)
    p.add_argument("--config", type=Path, default=None, help="Training config of the checkpoint; its ingest/features sections apply")
    p.add_argument("--mode", choices=("linear", "full"), default="linear")
    p.add_argument("--space", choices=("encoder", "projector"), default="encoder")
    p.add_argument("--seeds", type=int, default=1, help="Independent runs; mean and std are reported")
    p.add_argument("--seed", type=int, default=None, help="First seed (default: AUSCULTA_SEED or 0)")
    p.add_argument("--epochs", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay", type=float, default=0.99)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--scores", type=Path, default=None, help="Scores JSON to merge the mean results into")
    p.add_argument("--model-name", default="ausculta")
    p.add_argument("--percent", action="store_true", help="Store F1 in percent, like the shipped published scores")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="Score a predictions JSONL against manifest labels")
    p.add_argument("--task", required=True, choices=TASK_IDS)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--scores", type=Path, default=None)
    p.add_argument("--model-name", default="ausculta")
    p.add_argument("--percent", action="store_true", help="Store F1 in percent, like the shipped published scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="MRR / Borda aggregation over a scores JSON")
    p.add_argument("--scores", type=Path, default=PUBLISHED_SCORES, help="Scores JSON (default: shipped published scores)")
    p.add_argument("--group", choices=GROUPINGS, default="function")
    p.add_argument("--metric", choices=METRICS, default="macro_f1")
    p.add_argument("--out", type=Path, default=Path("runs/rank"))
    p.add_argument("--models", default=None, help="Comma-separated model subset")
    p.add_argument("--tasks", default=None, help="Comma-separated task subset")
    p.add_argument("--drop-incomplete", action="store_true", help="Skip tasks some model has no score for")
    p.add_argument("--classwise", choices=TASK_IDS, default=None, help="Class-wise normalized F1 radar for one task")
    p.add_argument("--no-charts", action="store_true")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("tasks", help="List the benchmark tasks")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_tasks)

    p = sub.add_parser("fixture", help="Write a synthetic corpus and a matching training config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--records", type=int, default=16)
    p.add_argument("--validation", type=int, default=4, help="Predefined validation records per dataset")
    p.add_argument("--datasets", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except AuscultaError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, FileNotFoundError) as e:
        # pydantic/config validation surfacing outside the config loader
        print(f"Error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
