import numpy as np
import pytest

from deepfit.harness.synthetic import default_appearance, orbit_camera
from deepfit.procedural import build_face_rig
from deepfit.render import MeshSurface, default_camera, rasterize
from deepfit.rig import posed_vertices


@pytest.fixture(scope="session")
def rig():
    return build_face_rig()


@pytest.fixture(scope="session")
def appearance(rig):
    return default_appearance(rig)


@pytest.fixture(scope="session")
def camera():
    return orbit_camera(-10.0)


@pytest.fixture(scope="session")
def front_camera():
    return default_camera()


def render(rig, camera, appearance, params):
    return rasterize(camera, MeshSurface(posed_vertices(rig, params), rig.triangles), appearance).image


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
