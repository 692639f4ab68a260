import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_RESULTS: dict = {}
FIXTURE_SECONDS: dict = {}  # wall time of the expensive session fixtures
LOSO_EPOCHS = 10


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE_RESULTS[number] = (name, bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")


@pytest.fixture(scope="session")
def synth_recordings():
    from carm.eeg import SynthConfig, generate_synthetic_session
    t0 = time.perf_counter()
    cfg = SynthConfig(seed=0)
    out = {(s, k): generate_synthetic_session(cfg, s, k) for s in range(1, 6) for k in range(1, 4)}
    FIXTURE_SECONDS["synth_recordings"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def loso_windows(synth_recordings):
    from carm.dataset import (SegmentationSpec, balance_classes, prepare_recordings,
                              zscore_per_subject)
    t0 = time.perf_counter()
    ws = prepare_recordings(list(synth_recordings.values()), SegmentationSpec(190, 25, 63))
    out = zscore_per_subject(balance_classes(ws, seed=0))
    FIXTURE_SECONDS["loso_windows"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def loso_models(loso_windows):
    """Best CNN trained once per held-out subject: ``{subject: (model, split, accuracy)}``."""
    from carm.dataset import loso_split
    from carm.models import best_cnn, evaluate, train
    t0 = time.perf_counter()
    out = {}
    for held in range(1, 6):
        split = loso_split(loso_windows, held, 0.8, seed=0)
        model = train(best_cnn(), split, epochs=LOSO_EPOCHS, seed=0)
        out[held] = (model, split, evaluate(model, split.test))
    FIXTURE_SECONDS["loso_models"] = time.perf_counter() - t0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
