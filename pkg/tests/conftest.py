import json
import sys
from pathlib import Path

import pytest
import torch

FIXTURES = Path(__file__).resolve().parent / "fixtures"
sys.path.insert(0, str(Path(__file__).resolve().parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def gold_queries() -> list[str]:
    return [
        line.strip()
        for line in (FIXTURES / "gold_queries.txt").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


@pytest.fixture(scope="session")
def mini_dataset() -> list[dict]:
    return json.loads((FIXTURES / "mini_dataset.json").read_text(encoding="utf-8"))


@pytest.fixture()
def endpoint_factory():
    from fixture_endpoint import FixtureEndpoint

    return FixtureEndpoint
