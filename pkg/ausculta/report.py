"""
Static report artifacts: SVG charts (Borda bars, MRR grouped bars, reciprocal-rank and
class-wise radars, training curves) and the per-directory run manifest.

Charts go through matplotlib's Agg backend with a fixed SVG hash salt, text kept as
text and no date metadata, so equal inputs give byte-identical files.
"""
from __future__ import annotations

import io
import logging
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from ausculta import __version__  # noqa: E402
from ausculta.fileio import atomic_write_bytes, atomic_write_text  # noqa: E402

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"

_SVG_RC = {
    "svg.hashsalt": "ausculta",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
}


def _save_svg(fig, path: Path | str) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def bar_chart(values: Mapping[str, float], path: Path | str, title: str = "", ylabel: str = "") -> Path:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        names = list(values)
        ax.bar(range(len(names)), [values[n] for n in names], color="#4c72b0")
        ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        ax.grid(axis="y", alpha=0.3)
        return _save_svg(fig, path)


def grouped_bar_chart(groups: Mapping[str, Mapping[str, float]], path: Path | str, title: str = "", ylabel: str = "") -> Path:
    """One cluster per group, one bar per model."""
    group_names = list(groups)
    models = list(next(iter(groups.values()))) if groups else []
    width = 0.8 / max(len(models), 1)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(1.8 * max(len(group_names), 2) + 2, 3))
        x = np.arange(len(group_names))
        for k, model in enumerate(models):
            ax.bar(x + k * width, [groups[g][model] for g in group_names], width, label=model)
        ax.set_xticks(x + width * (len(models) - 1) / 2, [g.replace("_", " ") for g in group_names])
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7, frameon=False)
        ax.grid(axis="y", alpha=0.3)
        return _save_svg(fig, path)


def radar_chart(axis_labels: Sequence[str], series: Mapping[str, Sequence[float]], path: Path | str, title: str = "") -> Path:
    """Closed polylines on a polar grid, one per series; values expected in [0, 1]."""
    n = len(axis_labels)
    angles = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    closed = np.concatenate([angles, angles[:1]])
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 5), subplot_kw={"projection": "polar"})
        for name, vals in series.items():
            v = np.asarray(vals, dtype=np.float64)
            ax.plot(closed, np.concatenate([v, v[:1]]), linewidth=1.2, label=name)
            ax.fill(closed, np.concatenate([v, v[:1]]), alpha=0.08)
        ax.set_xticks(angles, list(axis_labels))
        ax.set_ylim(0.0, 1.0)
        ax.set_title(title)
        ax.legend(loc="upper right", bbox_to_anchor=(1.3, 1.1), fontsize=7, frameon=False)
        return _save_svg(fig, path)


def training_curves(log, path: Path | str) -> Path:
    """Loss and accuracy per epoch: train and validation, combined and per dataset."""
    datasets = sorted({r.dataset_id for r in log.epochs})
    with plt.rc_context(_SVG_RC):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3))
        for dataset_id in datasets:
            for split, style in (("train", "-"), ("validation", "--")):
                rows = log.rows(split, dataset_id)
                if not rows:
                    continue
                epochs = [r.epoch for r in rows]
                label = f"{dataset_id} {split}"
                ax_loss.plot(epochs, [r.loss for r in rows], style, linewidth=1, label=label)
                ax_acc.plot(epochs, [r.accuracy for r in rows], style, linewidth=1, label=label)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("contrastive loss")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("instance accuracy")
        ax_acc.set_ylim(0.0, 1.0)
        ax_acc.legend(fontsize=6, frameon=False)
        return _save_svg(fig, path)


def render_rank_charts(report, out_dir: Path | str) -> list[Path]:
    """Charts for a RankReport: MRR clusters or one Borda bar chart per group, plus the per-task RR radar."""
    out_dir = Path(out_dir)
    stem = f"rank_{report.metric}_{report.grouping}"
    paths = []
    if report.aggregate == "mrr":
        paths.append(grouped_bar_chart(report.groups, out_dir / f"{stem}_mrr.svg", title=f"MRR ({report.metric})", ylabel="MRR"))
    else:
        for group, per_model in report.groups.items():
            paths.append(bar_chart(per_model, out_dir / f"{stem}_{group}.svg", title=f"Borda count: {group}", ylabel="points"))
    if len(report.tasks) >= 3:
        series = {m: [report.reciprocal_ranks[t][m] for t in report.tasks] for m in report.models}
        paths.append(radar_chart(report.tasks, series, out_dir / f"{stem}_rr_radar.svg", title=f"Reciprocal rank ({report.metric})"))
    logger.info("Wrote %d chart(s) to %s", len(paths), out_dir)
    return paths


class RunManifest(BaseModel):
    command: str
    config_hash: str = ""
    seeds: list[int] = []
    version: str = __version__
    inputs: list[str] = []
    outputs: list[str] = []
    started: str
    wall_clock_s: float


class RunClock:
    """Captures the start time of a command for its RunManifest."""

    def __init__(self) -> None:
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self._t0 = time.perf_counter()

    def elapsed(self) -> float:
        return round(time.perf_counter() - self._t0, 3)


def write_run_manifest(
    out_dir: Path | str,
    command: str,
    clock: RunClock,
    inputs: Sequence[Path | str] = (),
    outputs: Sequence[Path | str] = (),
    config_hash: str = "",
    seeds: Sequence[int] = (),
) -> Path:
    """One manifest per artifact directory; a rerun replaces it."""
    out_dir = Path(out_dir)
    manifest = RunManifest(
        command=command,
        config_hash=config_hash,
        seeds=list(seeds),
        inputs=[str(p) for p in inputs],
        outputs=sorted(str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p) for p in outputs),
        started=clock.started,
        wall_clock_s=clock.elapsed(),
    )
    return atomic_write_text(out_dir / RUN_MANIFEST, manifest.model_dump_json(indent=2) + "\n")


def read_run_manifest(out_dir: Path | str) -> Optional[RunManifest]:
    path = Path(out_dir) / RUN_MANIFEST
    if not path.exists():
        return None
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
