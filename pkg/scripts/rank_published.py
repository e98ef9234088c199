#!/usr/bin/env python3
"""
Rank the shipped published scores: MRR by function group for Macro-F1, Micro-F1 and
T16 accuracy, plus Borda counts by sound type and task type. Writes JSON/CSV reports
and SVG charts under --out.

Usage: python scripts/rank_published.py [--scores path] [--out dir]
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

# Project root (so "import ausculta" works when run as scripts/rank_published.py)
_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from ausculta import config
from ausculta.cli import PUBLISHED_SCORES
from ausculta.errors import AuscultaError
from ausculta.rank_aggregate import ScoreTable, build_rank_report, load_scores
from ausculta.report import render_rank_charts

RUNS = [
    ("macro_f1", "function"),
    ("micro_f1", "function"),
    ("accuracy", "function"),
    ("macro_f1", "sound"),
    ("macro_f1", "tasktype"),
]


def main() -> None:
    parser = argparse.ArgumentParser(description="Rank aggregation over the published benchmark scores")
    parser.add_argument("--scores", type=Path, default=PUBLISHED_SCORES)
    parser.add_argument("--out", type=Path, default=config.DATA_DIR / "published_rankings")
    args = parser.parse_args()
    try:
        doc = load_scores(args.scores)
        for metric, grouping in RUNS:
            report = build_rank_report(ScoreTable.from_scores(doc, metric), grouping)
            report.write(args.out)
            render_rank_charts(report, args.out)
            print(f"\n{metric} / {grouping} ({report.aggregate})")
            for group, per_model in report.groups.items():
                cells = "  ".join(f"{m}={v:.4f}" for m, v in per_model.items())
                print(f"  {group}: {cells}")
    except AuscultaError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()
