import math

import numpy as np
import pytest

from conftest import make_sim, two_layer
from upfwi.errors import InvalidArgumentError, ShapeMismatchError, StabilityError
from upfwi.wavesim import (SimConfig, SourceSpec, Wavefield, ricker_wavelet, laplacian, step, forward_model,
                           damping_profile, pad_velocity, unpad_adjoint, cfl_ratio, benchmark_geometry, desk_geometry,
                           _Stencil)


def test_ricker_peaks_at_delay():
    w = ricker_wavelet(25.0, 0.001, 200)
    assert w.dtype == np.float32
    assert int(np.argmax(w)) == 48
    assert w[48] == pytest.approx(1.0)


def test_ricker_rejects_bad_arguments():
    with pytest.raises(InvalidArgumentError):
        ricker_wavelet(0.0, 0.001, 10)
    with pytest.raises(InvalidArgumentError):
        ricker_wavelet(25.0, -0.001, 10)


@pytest.mark.parametrize("axis", [0, 1])
@pytest.mark.parametrize("power, second_derivative", [(0, lambda s: 0 * s), (1, lambda s: 0 * s),
                                                      (2, lambda s: 2.0 + 0 * s), (3, lambda s: 6.0 * s)])
def test_laplacian_exact_on_low_degree_polynomials(power, second_derivative, axis):
    dx = 0.5
    s = np.arange(12) * dx
    field = np.tile(s ** power, (12, 1))
    expected = np.tile(second_derivative(s), (12, 1))
    if axis == 0:
        field, expected = field.T.copy(), expected.T.copy()
    lap = laplacian(field, dx)
    np.testing.assert_allclose(lap[2:-2, 2:-2], expected[2:-2, 2:-2], rtol=1e-10, atol=1e-9)
    assert np.all(lap[:2] == 0) and np.all(lap[:, -2:] == 0)


def test_laplacian_needs_five_cells():
    with pytest.raises(ShapeMismatchError):
        laplacian(np.zeros((4, 8)), 1.0)


def test_step_preserves_constant_field():
    c = np.ones((12, 12), dtype=np.float32)
    zeros = np.zeros_like(c)
    nxt = step(Wavefield(c.copy(), c.copy()), np.ones_like(c), zeros, zeros, dt=0.5, dx=1.0)
    np.testing.assert_array_max_ulp(nxt[2:-2, 2:-2], c[2:-2, 2:-2], maxulp=4)
    assert np.all(nxt[:2] == 0)


def test_gather_shape_and_first_row_is_zero(tiny_sim):
    gather = forward_model(two_layer(16, 16), tiny_sim)
    assert gather.shape == (1, 80, 16)
    assert gather.data.dtype == np.float32
    assert np.all(gather.data[:, 0] == 0)
    assert gather.config_hash == tiny_sim.hash()
    assert np.max(np.abs(gather.data)) > 0


def test_zero_wavelet_gives_zero_gather():
    sim = make_sim()
    sim.sources = [SourceSpec(8, 1, np.zeros(sim.nt, dtype=np.float32))]
    assert np.all(forward_model(np.full((16, 16), 3000.0), sim).data == 0)


def test_symmetric_model_gives_mirrored_traces():
    sim = make_sim(nz=15, nx=21, nt=100, absorb_layers=8, source_columns=(10,))
    gather = forward_model(np.full((15, 21), 3000.0), sim).data[0]
    np.testing.assert_allclose(gather, gather[:, ::-1], atol=1e-6 * np.max(np.abs(gather)))


def test_linear_in_wavelet_amplitude(tiny_sim):
    v = two_layer(16, 16)
    base = forward_model(v, tiny_sim).data
    doubled = forward_model(v, tiny_sim.with_wavelet_scale(2.0)).data
    np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-5, atol=1e-7 * np.max(np.abs(base)))


def test_cfl_violation_raises_with_ratio(tiny_sim):
    with pytest.raises(StabilityError) as e:
        forward_model(np.full((16, 16), 10000.0), tiny_sim)
    assert e.value.ratio == pytest.approx(10000.0 * 0.001 / 15.0)
    assert cfl_ratio(np.full((16, 16), 6000.0), tiny_sim) == pytest.approx(0.4)


def test_velocity_shape_mismatch(tiny_sim):
    with pytest.raises(ShapeMismatchError):
        forward_model(np.full((10, 16), 3000.0), tiny_sim)


def test_source_outside_grid_is_rejected():
    sim = make_sim(source_columns=(40,))
    with pytest.raises(InvalidArgumentError):
        sim.validate()


def test_damping_profile_values():
    sim = benchmark_geometry()
    kappa = damping_profile(sim, np.full((70, 70), 3000.0))
    L = sim.absorb_layers
    assert kappa.shape == sim.padded_shape
    assert np.all(kappa[L:L + 70, L:L + 70] == 0)
    expected = 3000.0 * 0.001 * 3.0 / (2 * L * 15.0) * math.log(1e7)
    assert kappa[0, L + 10] == pytest.approx(expected, rel=1e-5)
    assert expected == pytest.approx(0.0967, abs=1e-4)
    # Euclidean distance in the corners is clipped at L
    assert kappa[0, 0] == pytest.approx(expected, rel=1e-5)


def test_unpad_adjoint_matches_padding():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5, 7))
    w = rng.standard_normal((5 + 6, 7 + 6))
    # <pad(v), w> == <v, unpad_adjoint(w)>
    assert np.sum(pad_velocity(v, 3) * w) == pytest.approx(np.sum(v * unpad_adjoint(w, 3)))


def test_config_json_roundtrip(tmp_path):
    sim = desk_geometry()
    sim.save(tmp_path / "sim.json")
    loaded = SimConfig.load(tmp_path / "sim.json")
    assert loaded.hash() == sim.hash()
    np.testing.assert_array_equal(loaded.sources[1].wavelet, sim.sources[1].wavelet)


def test_presets():
    bench = benchmark_geometry()
    assert bench.gather_shape == (5, 1000, 70)
    assert [s.column for s in bench.sources] == [0, 17, 34, 51, 68]
    desk = desk_geometry()
    assert desk.gather_shape == (3, 400, 35)
    assert cfl_ratio(np.full((70, 70), 6000.0), bench) == pytest.approx(0.4)


def _residual_energy(absorb_layers: int) -> tuple[float, float]:
    sim = make_sim(nz=40, nx=40, nt=350, absorb_layers=absorb_layers, source_columns=(20,), source_depth=20, freq=25.0)
    stencil = _Stencil(np.full((40, 40), 3000.0), sim)
    frames = np.zeros((1, sim.nt + 1) + sim.padded_shape, dtype=np.float32)
    stencil.march(stencil.zeros(), stencil.zeros(), 0, sim.nt, store=frames)
    L = absorb_layers
    interior = frames[0, :, L + 2:L + 38, L + 2:L + 38].astype(np.float64)
    energy = np.sum(interior ** 2, axis=(1, 2))
    peak = float(np.max(energy[100:150]))
    residual = float(np.mean(energy[-50:]))
    return residual, peak


def test_absorbing_layers_remove_outgoing_energy():
    residual, peak = _residual_energy(50)
    assert residual <= 0.05 * peak
    trapped, trapped_peak = _residual_energy(0)
    assert trapped >= 0.5 * trapped_peak


def test_bounded_long_run_on_benchmark_geometry():
    sim = benchmark_geometry()
    sim.sources = sim.sources[2:3]
    gather = forward_model(np.full((70, 70), 6000.0), sim).data
    assert np.all(np.isfinite(gather))
    peak = np.max(np.abs(gather))
    assert peak > 0
    assert peak <= 1e3 * np.max(np.abs(sim.sources[0].wavelet))
    assert np.max(np.abs(gather[:, -100:])) < 0.5 * peak
