"""
Pytest fixtures: a synthetic corpus on disk (session-scoped), the shipped published
scores and a seeded numpy Generator. Slow checks run only with AUSCULTA_SLOW_TESTS=1.
"""
import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent


def slow_tests_enabled() -> bool:
    return (os.environ.get("AUSCULTA_SLOW_TESTS") or "").strip().lower() in ("1", "true", "yes")


@pytest.fixture(scope="session")
def published_scores_path() -> Path:
    return ROOT / "ausculta" / "data" / "published_scores.json"


@pytest.fixture(scope="session")
def fixture_manifest(tmp_path_factory) -> Path:
    """8 train + 4 validation records of one synthetic dataset, T13 labels alternating 0/1."""
    from ausculta.corpus import synth_fixture

    out = tmp_path_factory.mktemp("fixture")
    return synth_fixture(out, n_datasets=1, n_records=8, n_validation=4, seed=0, duration_s=1.5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
