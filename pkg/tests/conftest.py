import logging

import numpy as np
import pytest
from hypothesis import settings

from hallufix.mesh import TriangleMesh, icosphere

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def pytest_configure(config):
    logging.getLogger("hallufix").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3, 0.4)


@pytest.fixture(scope="session")
def sphere2():
    return icosphere(2, 0.4)


def single_triangle(z=0.0, ccw=True, scale=0.3):
    v = np.array([[-scale, -scale, z], [scale, -scale, z], [0.0, scale, z]])
    f = np.array([[0, 1, 2]] if ccw else [[0, 2, 1]])
    return TriangleMesh(v, f)


def random_mesh(rng, subdivisions=2, radius=0.3, noise=0.01):
    from hallufix.gradcheck import random_instance

    return random_instance(rng, subdivisions)


# one line per acceptance criterion, printed in the terminal summary
CRITERIA = {}


def record_criterion(key, passed, detail=""):
    CRITERIA[key] = f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    print(CRITERIA[key])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[key])
