import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TOY_DIR = Path(__file__).parent.parent / "data" / "toy"


@pytest.fixture(scope="session")
def toy_dir() -> Path:
    if not TOY_DIR.exists():
        pytest.skip("toy data not generated")
    return TOY_DIR
