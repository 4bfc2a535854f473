import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from splankit.arm import default_arm
from splankit.scene import SplatScene

settings.register_profile("splankit", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("splankit")


def random_scene(rng, n, spread=1.0, std=(0.02, 0.4), weight=(0.01, 1.0), center=(0.0, 0.0, 0.0)):
    """Random anisotropic scene with ``n`` components."""
    rot = Rotation.random(n, random_state=int(rng.integers(2**31))).as_matrix().reshape(n, 3, 3)
    means = np.asarray(center) + rng.uniform(-spread, spread, (n, 3))
    lam = rng.uniform(*std, (n, 3)) ** 2
    return SplatScene(rng.uniform(*weight, n), means, rot, lam, rng.uniform(0, 1, (n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def arm():
    return default_arm()
