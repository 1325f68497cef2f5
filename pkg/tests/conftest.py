import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from quadcurv import core, synth

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def k():
    return core.DEFAULT_INTRINSICS


@pytest.fixture(scope="session")
def sphere_frame(k):
    """Noise-free reference sphere (r = 100 mm) with ground truth."""
    return synth.render(synth.sphere_scene(), k)


@pytest.fixture(scope="session")
def small_k():
    return core.Intrinsics(fx=262.5, fy=262.5, cx=160.0, cy=120.0, width=320, height=240)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
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
