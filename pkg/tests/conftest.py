import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ramat.model import ModelConfig, init_params  # noqa: E402
from ramat.reservoir import ReservoirConfig, build_reservoir  # noqa: E402

ACCEPTANCE: list[str] = []


def record(criterion: str, passed: bool | None, detail: str = "") -> None:
    """One summary line per acceptance criterion; ``None`` marks a non-testable statement."""
    status = "N/A" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE.append(f"[{status}] {criterion}" + (f": {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config():
    return ModelConfig(window_length=16, patch_length=4, num_channels=2, embed_dim=8,
                       num_heads=2, num_layers=1, ffn_dim=16)


@pytest.fixture
def tiny_spec(tiny_config):
    return build_reservoir(ReservoirConfig(reservoir_size=16), tiny_config.patch_dim, seed=8)


@pytest.fixture
def tiny_params(tiny_config, tiny_spec):
    return init_params(tiny_config, tiny_spec.reservoir_size, np.random.default_rng(0))
