"""Shared fixtures: single-threaded BLAS for bit-stability, and a pretrained
checkpoint cached on disk so the full test run pays the training cost once."""

import os
import time
from pathlib import Path

import pytest
from threadpoolctl import threadpool_limits

from tinytta.data import generate_dataset
from tinytta.model import ClipModel, load_checkpoint, save_checkpoint
from tinytta.pretrain import PretrainConfig, pretrain

# one line per acceptance check, printed in the terminal summary
ACCEPTANCE_LOG: list[str] = []

# seconds spent pretraining this session (0.0 on a cache hit); the direction
# experiment folds this into its wall-clock budget
PRETRAIN_SECONDS: float = 0.0


@pytest.fixture(scope="session", autouse=True)
def _single_blas_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def bench_dataset():
    """The full-size synthetic benchmark (4096 train / 1024 test)."""
    return generate_dataset(seed=0)


@pytest.fixture(scope="session")
def pretrained_checkpoint(bench_dataset):
    """Default-config pretrained checkpoint, cached under tests/_cache.

    The cache is keyed by a version suffix; if the data generator or model
    change, stale caches fail the accuracy gates downstream rather than pass
    silently — delete tests/_cache to force a rebuild.
    """
    cache_dir = Path(os.environ.get("TINYTTA_TEST_CACHE",
                                    Path(__file__).parent / "_cache"))
    cache_dir.mkdir(parents=True, exist_ok=True)
    (cache_dir / ".gitignore").write_text("*\n")
    path = cache_dir / "pretrained_seed0_v1.ckpt"
    if path.exists():
        return load_checkpoint(path)
    global PRETRAIN_SECONDS
    start = time.monotonic()
    ckpt = pretrain(ClipModel(seed=0), bench_dataset, PretrainConfig(), seed=0)
    PRETRAIN_SECONDS = time.monotonic() - start
    save_checkpoint(path, ckpt)
    return ckpt


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and report.failed \
            and item.fspath.basename == "test_acceptance.py":
        ACCEPTANCE_LOG.append(f"FAIL {item.name}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)
