import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vct.nn import set_determinism  # noqa: E402


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_determinism()
