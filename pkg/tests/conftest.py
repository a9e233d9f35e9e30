import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from protodoctor.config import TrainConfig
from protodoctor.data import DatasetSplit, encode_partitions
from protodoctor.model import ProtoDoctor
from protodoctor.schema import synthetic_schema
from protodoctor.synthetic import SyntheticSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_records():
    records, truth = generate_synthetic_dataset(SyntheticSpec.planted(n_records=40, T=4, seed=3))
    return records, truth


@pytest.fixture(scope="session")
def small_batches(small_records):
    records, _ = small_records
    ids = [r.admission_id for r in records]
    split = DatasetSplit(ids[:24], ids[24:32], ids[32:], seed=0)
    stats, tr, va, te = encode_partitions(records, split, synthetic_schema(), hours=4)
    return stats, tr, va, te


@pytest.fixture
def tiny_model(small_batches):
    _, tr, _, _ = small_batches
    cfg = TrainConfig.tiny()
    return ProtoDoctor(cfg, tr.physiology.shape[-1], tr.demographics.shape[-1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
