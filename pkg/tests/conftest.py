import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from shapeservo.harness import datasets
from shapeservo.harness.config import ExperimentConfig


@pytest.fixture(scope="session")
def tiny_samples():
    """Ten training samples from two short pulls of the default box."""
    cfg = ExperimentConfig(n_trajectories=1, goals_per_trajectory=2, n_pairs=10, moves_min=6, moves_max=8)
    pairs, _ = datasets.gen_data(cfg)
    assert len(pairs) == 10
    return datasets.to_samples(pairs)


CRITERIA = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
