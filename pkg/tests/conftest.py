import os
from pathlib import Path

import pytest

from sar.dataset import parse_ratings

ML100K_CANDIDATES = [os.environ.get("SAR_ML100K", ""), "/root/data/ml-100k/u.data", "data/ml-100k/u.data"]


def ml100k_path() -> Path | None:
    for cand in ML100K_CANDIDATES:
        if cand and Path(cand).is_file():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def ml100k():
    path = ml100k_path()
    if path is None:
        pytest.skip("MovieLens 100K u.data not found; run scripts/fetch_ml100k.py or set SAR_ML100K")
    return parse_ratings(path, "ml100k")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
