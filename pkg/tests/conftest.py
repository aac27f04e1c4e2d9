import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bubblekit import Federation
from bubblekit.store import MemoryResourceStore

FIXTURES = Path(__file__).parent.parent / "fixtures"


@pytest.fixture
def fed():
    return Federation(store=MemoryResourceStore())


@pytest.fixture
def repo(tmp_path):
    from bubblekit.repo import init_repo

    root = tmp_path / "repo"
    init_repo(str(root))
    return str(root)


def fixture_path(name: str) -> str:
    return str(FIXTURES / f"{name}.json")
