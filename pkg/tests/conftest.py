import numpy as np
import pytest

from flowcast.series import Volume, VolumeSequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_volume(rng, shape=(4, 4, 4)):
    return Volume(rng.random(shape, dtype=np.float32))


def make_sequence(rng, n_contexts=3, shape=(4, 4, 4), patient_id="p0"):
    times = np.sort(rng.uniform(0.0, 1.0, size=n_contexts))
    while n_contexts > 1 and np.min(np.diff(times)) <= 0:
        times = np.sort(rng.uniform(0.0, 1.0, size=n_contexts))
    contexts = tuple((random_volume(rng, shape), float(t)) for t in times)
    return VolumeSequence(
        contexts=contexts,
        target=random_volume(rng, shape),
        target_time=float(times[-1] + rng.uniform(0.05, 0.5)),
        patient_id=patient_id,
    )
