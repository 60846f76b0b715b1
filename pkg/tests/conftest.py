import json
from pathlib import Path

import pytest

from russ.guidelines import load_store
from russ.tools import default_registry


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def store(registry):
    return load_store(registry=registry)


@pytest.fixture(scope="session")
def bundled_queries():
    path = Path(__file__).resolve().parents[1] / "src" / "russ" / "data" / "queries.json"
    return json.loads(path.read_text())
