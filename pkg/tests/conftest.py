import hypothesis
import numpy as np
import pytest

from co2surro.data import FieldSnapshot, SimulationSeries

hypothesis.settings.register_profile("ci", max_examples=30, deadline=None)
hypothesis.settings.load_profile("ci")


def make_series(n_snapshots=6, height=32, width=32, seed=0, sim_id="sim0000"):
    """Random but physically-shaped series: porosity in [0,1], finite fields."""
    rng = np.random.default_rng(seed)
    snaps = []
    for _ in range(n_snapshots):
        snaps.append(
            FieldSnapshot(
                concentration=rng.random((height, width)).astype(np.float32),
                porosity=(0.2 + 0.6 * rng.random((height, width))).astype(np.float32),
                velocity_x=rng.standard_normal((height, width)).astype(np.float32),
                velocity_y=rng.standard_normal((height, width)).astype(np.float32),
            )
        )
    return SimulationSeries(snaps, dx=1.0, dt_snapshot=2.0, sim_id=sim_id, seed=seed)


@pytest.fixture
def small_series():
    return make_series()


@pytest.fixture
def series_pair():
    return [make_series(seed=0, sim_id="sim0000"), make_series(seed=1, sim_id="sim0001")]
