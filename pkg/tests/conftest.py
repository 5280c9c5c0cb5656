"""Shared fixtures: small datasets and models sized for fast unit tests."""

import numpy as np
import pytest

# Acceptance verdict lines collected by tests/test_acceptance.py and echoed
# after the run, outside pytest's output capture.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

from fusionlens import autodiff
from fusionlens.model import FusionModel, ModelConfig
from fusionlens.synthdata import GenSpec, generate


@pytest.fixture(autouse=True)
def finite_guard():
    """Every primitive output is checked for NaN/inf during tests."""
    old = autodiff.CHECK_FINITE
    autodiff.CHECK_FINITE = True
    yield
    autodiff.CHECK_FINITE = old


@pytest.fixture(scope="session")
def tiny_spec():
    return GenSpec(seed=11, n_samples=48, t_a=8, t_b=8, vocab_a=32,
                   vocab_b=32, noise_rate=0.0)


@pytest.fixture(scope="session")
def tiny_samples(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained model matched to the tiny corpus dimensions."""
    return FusionModel(ModelConfig(d=16, d_raw=12, layers=2, heads=2,
                                   mlp_ratio=2, seed=3, vocab_a=32, vocab_b=32))


@pytest.fixture(scope="session")
def tiny_seq(tiny_model, tiny_samples):
    return tiny_model.encode_samples(tiny_samples)
