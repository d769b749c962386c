import numpy as np
import pytest
import torch

from pomo.model import AttentionPolicy, ModelConfig

# lines collected by the acceptance suite, printed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_policy(kind="tsp", variant="POMO", seed=0, dtype=torch.float64, d_h=16, n_layers=2, n_heads=4, d_ff=32):
    cfg = ModelConfig(kind=kind, d_h=d_h, n_layers=n_layers, n_heads=n_heads, d_ff=d_ff, variant=variant)
    return AttentionPolicy(cfg, seed=seed, dtype=dtype)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
