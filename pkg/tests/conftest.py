import numpy as np
import pytest

from fusepos import simulator as S
from fusepos.tensor import RngStream


def small_dataset(seed: int = 0, n_traj: int = 3, duration: float = 60.0, sigma: float = 1.0):
    rng = RngStream(seed)
    parts = []
    for i in range(n_traj):
        tr = S.gen_trajectory(S.TrajectoryConfig(duration=duration), rng.child(f"traj{i}"))
        parts.append(
            S.make_dataset(tr, S.testbed_beacons(), S.NoiseSpec("invariant", sigma), S.WindowConfig(), rng.child(f"data{i}"), traj_id=0)
        )
    ds = S.Dataset.concat(parts)
    return S.split(ds, (1 / 3, 1 / 3, 1 / 3), by="trajectory") if n_traj == 3 else ds


@pytest.fixture(scope="session")
def small_ds():
    return small_dataset()


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
