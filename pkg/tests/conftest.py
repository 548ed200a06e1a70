import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("abc:"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_text():
    from aptad.encoders import TextEncoder
    return TextEncoder(dim=16, depth=2).init_params(3)


@pytest.fixture(scope="session")
def tiny_vis():
    from aptad.encoders import VisualEncoder
    return VisualEncoder(image_size=32, patch_size=8, depth=2, width=16, dim=16,
                         k_radius=1.5).init_params(4)
