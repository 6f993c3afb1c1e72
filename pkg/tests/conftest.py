from pathlib import Path

import numpy as np
import pytest
from PIL import Image

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def fixture_photo() -> np.ndarray:
    with Image.open(DATA / "photo.png") as im:
        return np.asarray(im.convert("RGB"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
