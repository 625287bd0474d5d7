import pytest
import torch

from clear_scvd.config import RunConfig
from clear_scvd.corpus import generate_synthetic_corpus, prepare

torch.set_num_threads(1)


def tiny_config(**changes) -> RunConfig:
    """Small transformer settings that train in well under a second per epoch."""
    base = RunConfig(
        k=16, heads=2, layers_mlm=1, layers_feat=1, ffn_dim=32, max_len=64,
        batch_size=8, epochs_cl=2, epochs_ft=2, learning_rate=1e-3, min_frequency=1,
    )
    return base.replace(**changes)


@pytest.fixture(scope="session")
def toy_examples():
    return generate_synthetic_corpus(24, 0.5, seed=3)


@pytest.fixture(scope="session")
def toy_prepared(toy_examples):
    return prepare(toy_examples, ratio=0.8, seed=0, min_frequency=1, max_len=64)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
