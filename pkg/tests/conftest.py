import numpy as np
import pytest
import torch

from toolseg.segmodel import ModelConfig
from toolseg.synthdata import DatasetReader, build_dataset
from toolseg.trainer import TrainConfig

TINY_MODEL = ModelConfig(widths=(4, 8))


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    return build_dataset(n_sim=40, n_real=20, seed=3, out_dir=root, height=32, width=32)


@pytest.fixture
def tiny_reader(tiny_manifest):
    return DatasetReader(tiny_manifest)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=1, batch_size=8, model=TINY_MODEL, seeds=(0,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
