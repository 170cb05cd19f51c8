import numpy as np
import pytest

from surgestream.geometry import CameraIntrinsics
from surgestream.stereo import gen_synthetic_scene, peg_scene_spec


@pytest.fixture(scope="session")
def intr():
    return CameraIntrinsics(f=500.0, b=0.005, cx=320.0, cy=256.0,
                            width=640, height=512)


@pytest.fixture(scope="session")
def small_spec():
    return peg_scene_spec(320, 256, seed=7)


@pytest.fixture(scope="session")
def small_pair(small_spec):
    return gen_synthetic_scene(small_spec)


@pytest.fixture(scope="session")
def reference_pair():
    from surgestream.stereo import reference_scene_spec

    return gen_synthetic_scene(reference_scene_spec())


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    """Uniform random rotation matrix (quaternion method)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {name}: {outcome}")
