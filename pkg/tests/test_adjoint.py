import numpy as np
import pytest

from conftest import make_sim, two_layer
from upfwi.adjoint import CheckpointPolicy, forward_with_tape, backprop, gradient, grad_check, directional_check
from upfwi.errors import ShapeMismatchError, GeometryMismatchError
from upfwi.wavesim import forward_model


def misfit_against(observed):
    observed = np.asarray(observed, dtype=np.float64)

    def loss_fn(gather):
        r = np.asarray(gather, dtype=np.float64) - observed
        return 0.5 * float(np.sum(r * r)), r
    return loss_fn


@pytest.fixture
def inversion_problem(tiny_sim):
    observed = forward_model(two_layer(16, 16, bottom=3600.0), tiny_sim, dtype=np.float64).data
    current = two_layer(16, 16, bottom=3300.0).astype(np.float64)
    return tiny_sim, current, misfit_against(observed)


def test_grad_check_in_double_precision(inversion_problem):
    sim, current, loss_fn = inversion_problem
    report = grad_check(current, sim, loss_fn, cells=[(8, 8), (6, 3), (4, 10), (3, 6)], eps=0.1,
                        adjoint_dtype=np.float64)
    assert report["passed"]
    assert report["max_relative_error"] < 1e-4
    assert not report["truncation_dominated"]


def test_grad_check_in_production_precision(inversion_problem):
    sim, current, loss_fn = inversion_problem
    report = grad_check(current, sim, loss_fn, cells=[(8, 8), (6, 3), (4, 10)], eps=0.1)
    assert report["passed"]
    assert report["max_relative_error"] < 1e-2


def test_grad_check_flags_large_perturbations(inversion_problem):
    sim, current, loss_fn = inversion_problem
    with pytest.warns(UserWarning):
        report = grad_check(current, sim, loss_fn, cells=[(8, 8)], eps=100.0, adjoint_dtype=np.float64)
    assert report["truncation_dominated"]


def test_grad_check_rejects_cells_outside_the_model(inversion_problem):
    sim, current, loss_fn = inversion_problem
    with pytest.raises(GeometryMismatchError):
        grad_check(current, sim, loss_fn, cells=[(16, 0)], adjoint_dtype=np.float64)


def test_directional_derivative(inversion_problem):
    sim, current, loss_fn = inversion_problem
    direction = np.random.default_rng(1).standard_normal(current.shape)
    report = directional_check(current, sim, loss_fn, direction, adjoint_dtype=np.float64)
    assert report["relative_error"] < 1e-4


def random_problem(rng):
    nz, nx = (int(n) for n in rng.integers(10, 21, size=2))
    nt = int(rng.integers(60, 101))
    columns = tuple(int(c) for c in rng.choice(nx, size=int(rng.integers(1, 3)), replace=False))
    sim = make_sim(nz=nz, nx=nx, nt=nt, source_columns=columns)
    true = two_layer(nz, nx, bottom=float(rng.uniform(3300.0, 3900.0)), interface=int(rng.integers(3, nz - 2)))
    current = np.repeat(np.linspace(3000.0, 3400.0, nz, dtype=np.float32)[:, None], nx, axis=1)
    observed = forward_model(true, sim, dtype=np.float64).data
    return sim, current.astype(np.float64), misfit_against(observed)


def test_directional_derivative_on_random_problems():
    rng = np.random.default_rng(2024)
    errors = []
    for _ in range(20):
        sim, current, loss_fn = random_problem(rng)
        direction = rng.standard_normal(current.shape)
        errors.append(directional_check(current, sim, loss_fn, direction)["relative_error"])
    assert np.median(errors) < 1e-3
    assert max(errors) < 1e-2


def test_gradient_respects_causality():
    sim = make_sim(nz=10, nx=60, nt=10, absorb_layers=4, source_columns=(5,), receiver_columns=range(11))
    observed = np.zeros(sim.gather_shape)
    _, _, g = gradient(np.full((10, 60), 3000.0), sim, misfit_against(observed), dtype=np.float64)
    assert np.any(g[:, :10] != 0)
    assert np.all(g[:, 50] == 0)


def test_zero_seed_gives_zero_gradient(tiny_sim):
    _, tape = forward_with_tape(two_layer(16, 16), tiny_sim)
    g = backprop(tape, np.zeros(tiny_sim.gather_shape))
    assert g.shape == (16, 16)
    assert np.all(g == 0)


def test_seed_shape_is_checked(tiny_sim):
    _, tape = forward_with_tape(two_layer(16, 16), tiny_sim)
    with pytest.raises(ShapeMismatchError):
        backprop(tape, np.zeros((1, 79, 16)))


def test_gradient_is_linear_in_the_seed(tiny_sim):
    _, tape = forward_with_tape(two_layer(16, 16), tiny_sim, dtype=np.float64)
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2,) + tiny_sim.gather_shape)
    g_a, g_b = backprop(tape, a), backprop(tape, b)
    np.testing.assert_allclose(backprop(tape, 2.0 * a), 2.0 * g_a, rtol=1e-12)
    np.testing.assert_allclose(backprop(tape, a - 3.0 * b), g_a - 3.0 * g_b, rtol=0, atol=1e-9 * np.max(np.abs(g_a - 3.0 * g_b)))


def test_segment_checkpoints_match_full_storage(inversion_problem):
    sim, current, loss_fn = inversion_problem
    value_full, gather_full, g_full = gradient(current, sim, loss_fn, CheckpointPolicy("full"))
    value_seg, gather_seg, g_seg = gradient(current, sim, loss_fn, CheckpointPolicy("segments", segment=7))
    np.testing.assert_array_equal(gather_full.data, gather_seg.data)
    assert value_full == value_seg
    np.testing.assert_allclose(g_seg, g_full, rtol=1e-6, atol=1e-6 * np.max(np.abs(g_full)))


@pytest.mark.parametrize("policy", [CheckpointPolicy("full"), CheckpointPolicy("segments", segment=9)])
def test_tape_replays_the_gather(tiny_sim, policy):
    gather, tape = forward_with_tape(two_layer(16, 16), tiny_sim, policy)
    np.testing.assert_array_equal(tape.replay(), tape.gather)
    np.testing.assert_array_equal(tape.gather, forward_model(two_layer(16, 16), tiny_sim, dtype=np.float64).data)
    assert gather.data.dtype == np.float32
    single = forward_model(two_layer(16, 16), tiny_sim).data
    np.testing.assert_allclose(gather.data, single, rtol=0, atol=1e-4 * np.max(np.abs(single)))


def test_auto_policy_switches_to_checkpoints(tiny_sim):
    _, tape = forward_with_tape(two_layer(16, 16), tiny_sim, CheckpointPolicy("auto", memory_budget=200_000))
    assert tape.storage == "segments"
    _, tape = forward_with_tape(two_layer(16, 16), tiny_sim, CheckpointPolicy("auto"))
    assert tape.storage == "full"
    with pytest.raises(MemoryError):
        forward_with_tape(two_layer(16, 16), tiny_sim, CheckpointPolicy("auto", memory_budget=1000))
