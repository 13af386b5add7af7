import numpy as np
import pytest

from vortexlab import geometry as G

BENCH = dict(a1=39.5, a2=19.7, r0=0.2)


@pytest.fixture(scope="session")
def bench_metric():
    return G.make_metric("warped_axis", (32, 32, 32), (1.0, 1.0, 1.0), **BENCH)


@pytest.fixture(scope="session")
def bench_loop(bench_metric):
    ts = np.linspace(0.0, 1.0, 128, endpoint=False)
    axis = np.stack([ts, np.full_like(ts, 0.5), np.full_like(ts, 0.5)], axis=-1)
    return G.geodesic_relax(bench_metric, axis)


@pytest.fixture(scope="session")
def bench_chart(bench_loop):
    return G.TubularChart(bench_loop, radius=BENCH["r0"])


@pytest.fixture(scope="session")
def flat_metric():
    return G.make_metric("euclidean", (32, 32, 32), (1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def flat_loop(flat_metric):
    ts = np.linspace(0.0, 1.0, 128, endpoint=False)
    axis = np.stack([ts, np.full_like(ts, 0.5), np.full_like(ts, 0.5)], axis=-1)
    return G.geodesic_relax(flat_metric, axis)
