import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def noisy_square(seed, size=16, noise=0.05):
    """Red square on blue, per-channel Gaussian noise; returns (image, truth, loose init mask)."""
    rng = np.random.default_rng(seed)
    img = np.empty((size, size, 3))
    img[:] = (0.1, 0.1, 0.9)
    truth = np.zeros((size, size), dtype=bool)
    a = size // 4
    truth[a:a + size // 2, a:a + size // 2] = True
    img[truth] = (0.9, 0.1, 0.1)
    img = np.clip(img + rng.normal(0, noise, img.shape), 0.0, 1.0)
    init = np.zeros((size, size), dtype=bool)
    b = size // 8
    init[b:size - b, b:size - b] = True
    return img, truth, init


@pytest.fixture
def square_fixture():
    return noisy_square(0)
