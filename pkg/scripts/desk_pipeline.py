#!/usr/bin/env python3
"""
End-to-end desk run on a synthetic corpus: fixture -> preprocess -> pretrain -> probe.
Same code path as the `ausculta` subcommands; every stage writes into --work-dir.

Env:
  AUSCULTA_SEED       – overrides the fixture/pretrain seed
  AUSCULTA_LOG_LEVEL  – logging level (default INFO)
  AUSCULTA_JOBS       – preprocess worker bound (default 1)
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

# Project root (so "import ausculta" works when run as scripts/desk_pipeline.py)
_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

try:
    from dotenv import load_dotenv
    load_dotenv(_ROOT / ".env")
except ImportError:
    pass

from ausculta import config
from ausculta.cli import main as cli_main


def _run(argv: list[str]) -> None:
    code = cli_main(argv)
    if code != 0:
        print(f"Error: stage '{argv[0]}' exited with {code}", file=sys.stderr)
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description="Synthetic end-to-end pipeline run")
    parser.add_argument("--work-dir", type=Path, default=config.DATA_DIR / "desk_run")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--seed", type=int, default=config.seed_override() or 0)
    parser.add_argument("--probe-seeds", type=int, default=3)
    args = parser.parse_args()

    work = args.work_dir
    fixture, cache, run = work / "fixture", work / "cache", work / "pretrain"
    _run(["fixture", "--out", str(fixture), "--seed", str(args.seed), "--epochs", str(args.epochs)])
    _run(["preprocess", "--manifest", str(fixture / "manifest.jsonl"), "--out", str(cache)])

    # point the fixture config at the preprocessed cache
    cfg_path = fixture / "pretrain_config.json"
    cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
    cfg.update({"corpus": str((cache / "manifest.jsonl").resolve()), "cache_dir": str(cache.resolve()), "out_dir": str(run.resolve())})
    cfg_path.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    _run(["pretrain", "--config", str(cfg_path), "--seed", str(args.seed)])

    scores = work / "scores.json"
    _run([
        "probe", "--task", "T13", "--ckpt", str(run / "checkpoint.abcp"), "--manifest", str(cache / "manifest.jsonl"),
        "--config", str(cfg_path), "--out", str(work / "probe"), "--seeds", str(args.probe_seeds),
        "--lr", "1e-2", "--scores", str(scores), "--model-name", "desk-model",
    ])
    print(f"Done. Artifacts in {work}")


if __name__ == "__main__":
    main()
