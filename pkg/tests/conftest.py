import contextlib
import io
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from advlab.cli import main
from advlab.core.config import DatasetDescriptor
from advlab.core.datasets import ExampleSet, dataset_present, ensure_dataset
from advlab.core.rng import rng_stream, torch_seeded
from advlab.nets import TargetModel

TOY = DatasetDescriptor("toy", 3, (1, 8, 8), (60, 20, 20))


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def toy_descriptor():
    return TOY


def random_examples(n, descriptor=TOY, seed=0):
    rng = rng_stream(seed, "tests:examples")
    pixels = rng.random((n, *descriptor.shape), dtype=np.float32)
    labels = rng.integers(0, descriptor.num_classes, n)
    return ExampleSet(pixels, labels, descriptor)


def toy_target(descriptor=TOY, hidden=16, seed=0):
    """Flatten -> Linear -> ReLU encoder plus linear classifier, frozen."""
    c, h, w = descriptor.shape
    with torch_seeded(seed, "tests:toy-target"):
        enc = nn.Sequential(nn.Flatten(), nn.Linear(c * h * w, hidden), nn.ReLU())
        cls = nn.Linear(hidden, descriptor.num_classes)
    return TargetModel(enc, cls, hidden, "toy", descriptor).freeze(True)


@pytest.fixture
def examples():
    return random_examples(40)


@pytest.fixture(scope="session")
def mnist_ready():
    if not dataset_present("mnist"):
        ensure_dataset("mnist")
    return True


@pytest.fixture(scope="session")
def cifar_ready():
    if not dataset_present("cifar10"):
        ensure_dataset("cifar10")
    return True


SMOKE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


def run_cli(*argv):
    """Run ``advlab`` in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory, mnist_ready):
    """Two independent end-to-end smoke runs with the same config and seed."""
    dirs = []
    for i in range(2):
        d = tmp_path_factory.mktemp(f"smoke{i}")
        code, out, err = run_cli("run", "--config", SMOKE_CONFIG, "--out", d)
        assert code == 0, err
        dirs.append(d)
    return dirs


CONFIG_DIR = SMOKE_CONFIG.parent

# criterion number -> (ok, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def pipeline_run(tmp_path_factory, config, name):
    """Run ``advlab run`` for ``config``; returns (run dir, wall seconds).

    With ``ADVLAB_RUNS_DIR`` set, a finished run under that directory is
    reused and its time is taken from the manifest's per-stage seconds.
    """
    base = os.environ.get("ADVLAB_RUNS_DIR")
    d = Path(base) / name if base else tmp_path_factory.mktemp(name)
    report = d / "report" / "report.csv"
    if base and report.exists():
        stages = json.loads((d / "manifest.json").read_text())["stages"]
        return d, sum(s["seconds"] for s in stages.values())
    t0 = time.perf_counter()
    code, _, err = run_cli("run", "--config", config, "--out", d)
    assert code == 0, err
    return d, time.perf_counter() - t0


@pytest.fixture(scope="session")
def mnist_run(tmp_path_factory, mnist_ready):
    return pipeline_run(tmp_path_factory, CONFIG_DIR / "mnist_desk.json", "mnist")


@pytest.fixture(scope="session")
def cifar_run(tmp_path_factory, cifar_ready):
    return pipeline_run(tmp_path_factory, CONFIG_DIR / "cifar_desk.json", "cifar10")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
