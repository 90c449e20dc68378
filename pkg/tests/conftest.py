import numpy as np
import pytest

from upfwi import config
from upfwi.geogen import GeoParams
from upfwi.wavesim import SimConfig, SourceSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Runs the long acceptance experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_switches():
    config.show_progress = False
    config.show_warnings = False
    config.n_jobs = 1
    config.nan_check = False
    yield
    config.show_progress = True
    config.show_warnings = True


def make_sim(nz=16, nx=16, nt=80, absorb_layers=6, source_columns=(8,), source_depth=1, receiver_depth=1,
             receiver_columns=None, freq=40.0, dx=15.0, dt=0.001) -> SimConfig:
    sources = [SourceSpec.ricker(c, source_depth, freq, dt, nt) for c in source_columns]
    receivers = list(range(nx)) if receiver_columns is None else list(receiver_columns)
    return SimConfig(nx=nx, nz=nz, dx=dx, dt=dt, nt=nt, sources=sources, receiver_depth=receiver_depth,
                     receiver_columns=receivers, absorb_layers=absorb_layers)


def two_layer(nz, nx, top=3000.0, bottom=3600.0, interface=None) -> np.ndarray:
    v = np.full((nz, nx), top, dtype=np.float32)
    v[(nz // 2 if interface is None else interface):, :] = bottom
    return v


@pytest.fixture
def sim_factory():
    return make_sim


@pytest.fixture
def tiny_sim():
    return make_sim()


@pytest.fixture
def tiny_geology():
    return GeoParams(nz=16, nx=16, layer_thickness_range=(3, 5), fault_shift_range=(1, 3),
                     curve_amplitude_range=(1.0, 2.0), curve_period_range=(8.0, 32.0), seed=3)


@pytest.fixture
def corpus_sim():
    # 64 samples in time so the network input is long enough without decimation
    return make_sim(nz=16, nx=16, nt=64, absorb_layers=6, source_columns=(2, 13))
