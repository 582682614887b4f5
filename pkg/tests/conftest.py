import numpy as np
import pytest

from raypath.geometry import Scene

BIG_FLOOR = [[-10.0, -10.0, 0.0], [10.0, -10.0, 0.0], [0.0, 10.0, 0.0]]
BIG_CEILING = [[-10.0, -10.0, 2.0], [10.0, -10.0, 2.0], [0.0, 10.0, 2.0]]


@pytest.fixture
def mirror_scene():
    """TX=(0,0,1), RX=(2,0,1) over a large floor triangle in z=0."""
    return Scene.from_arrays([0, 0, 1], [2, 0, 1], [BIG_FLOOR])


@pytest.fixture
def two_mirror_scene():
    return Scene.from_arrays([0, 0, 1], [2, 0, 1], [BIG_FLOOR, BIG_CEILING])


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def random_similarity(rng, allow_reflection=True):
    """A random map x -> s * R x + t, as a function on (M, 3) point arrays."""
    rot = random_rotation(rng)
    if not allow_reflection and np.linalg.det(rot) < 0:
        rot[:, 0] *= -1
    scale = float(np.exp(rng.uniform(-2, 2)))
    shift = rng.uniform(-50, 50, size=3)
    return lambda pts: scale * np.asarray(pts) @ rot.T + shift


def random_scene(rng, n=8) -> Scene:
    return Scene.from_arrays(rng.normal(size=3), rng.normal(size=3), rng.normal(size=(n, 3, 3)))


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
