import numpy as np
import pytest

from corrobust.model import ModelSpec, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 3-stage desk model on 3x8x8 inputs."""
    return build_model(ModelSpec(input_shape=(3, 8, 8), widths=(4, 6, 8), num_classes=3), seed=3)


@pytest.fixture
def tiny_batch(rng):
    x = rng.uniform(0.05, 0.95, size=(6, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, size=6)
    return x, y


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
