import numpy as np
import pytest

from enkf_lab.model import golden_model, validate


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def golden():
    return golden_model()


@pytest.fixture
def model2():
    """Two-dimensional model with a non-normal A and full observations."""
    return validate([[1.0, 0.5], [0.0, 0.8]], np.eye(2), np.eye(2), np.eye(2), np.eye(2))


def random_model(rng, d, d0=None):
    d0 = d if d0 is None else d0
    from enkf_lab.linalg import random_spd
    return validate(rng.standard_normal((d, d)), rng.standard_normal((d0, d)),
                    random_spd(rng, d, 0.2, 3.0), random_spd(rng, d0, 0.2, 3.0),
                    random_spd(rng, d, 0.2, 3.0))


ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    """Log one acceptance criterion for the end-of-run summary."""
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}  {detail}")
