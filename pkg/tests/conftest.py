import sys
import os

import numpy as np
import pytest

from qdaed.distill import teacher_train
from qdaed.features import read_manifest
from qdaed.synth import SynthConfig, synth_dataset

# half-second clips keep training tests quick: 46 frames each
TINY = SynthConfig(n_train=160, n_val=60, n_test=80, clip_seconds=0.5, event_prob=0.3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return synth_dataset(0, str(out), TINY)


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return read_manifest(tiny_dataset)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_manifest):
    return teacher_train(tiny_manifest, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tree_bytes(root):
    """Relative path -> file bytes for every file under ``root``."""
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="session")
def fp_training_checkpoint(tiny_manifest):
    from qdaed.trainer import TrainConfig, train

    return train(TrainConfig(hidden=16, max_epochs=8, patience=8, seed=0), tiny_manifest)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
