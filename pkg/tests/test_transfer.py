import warnings

import numpy as np
import pytest
from conftest import normal_form_model, random_relative_degree, random_stable_model, smooth_signal
from hypothesis import given
from hypothesis import strategies as st

from l1transfer.ilc import IlcConfig, run_ilc
from l1transfer.lti import (StateSpaceModel, UndefinedRelativeDegreeError, VectorRelativeDegree,
                            discretize_reference, lifted_representation, simulate,
                            vector_relative_degree)
from l1transfer.transfer import (MissingFeedbackError, ModelFeedback, TransferMap,
                                 UnobservableError, apply_transfer_map_online, build_window_io,
                                 build_window_state, fit_transfer_map,
                                 map_between_reference_models, nominal_inverse_theta,
                                 perfect_tracking_input, state_reconstructor)

seeds = st.integers(0, 2**32 - 1)


def tracking_gap(model, vrd, yd, u, x0=None):
    """max |y_i(k) - y*_i(k)| over k >= r_i, k = 1..N."""
    y = simulate(model, u, x0).y
    N = u.shape[0]
    gaps = [np.max(np.abs(y[ri - 1:, i] - yd[ri:N + 1, i]), initial=0.0)
            for i, ri in enumerate(vrd.r)]
    return max(gaps)


def random_case(rng, length=120, max_n=8, max_p=3):
    r, n = random_relative_degree(rng, max_n, max_p)
    model, A0, _ = normal_form_model(rng, r, n)
    vrd = vector_relative_degree(model)
    yd = smooth_signal(rng, length, len(r))
    return model, vrd, yd


# --- perfect tracking ---------------------------------------------------------------

def test_zero_reference_gives_zero_input(rng):
    model, vrd, _ = random_case(rng)
    u, x = perfect_tracking_input(model, vrd, np.zeros((50, model.p)))
    assert not u.any() and not x.any()


def test_reference_model_sinusoid_tracked_exactly():
    model = discretize_reference(2.0, 5.0, 0.01)
    vrd = vector_relative_degree(model)
    t = np.arange(601) * 0.01
    yd = np.column_stack([np.sin(t), 0.5 * np.sin(2 * t), 1 - np.cos(t)])
    u, _ = perfect_tracking_input(model, vrd, yd)
    assert tracking_gap(model, vrd, yd, u) < 1e-9


@given(seeds)
def test_random_minimum_phase_tracking_exact(seed):
    rng = np.random.default_rng(seed)
    model, vrd, yd = random_case(rng)
    u, _ = perfect_tracking_input(model, vrd, yd)
    assert tracking_gap(model, vrd, yd, u) < 1e-9


def test_internal_state_bounded_over_long_horizon(rng):
    model, _, _ = normal_form_model(rng, (1,), 2, zeros=[0.5])
    vrd = vector_relative_degree(model)
    t = np.arange(10_001)
    yd = np.sin(0.01 * t)[:, None] + 0.3 * np.sin(0.13 * t)[:, None]
    _, x = perfect_tracking_input(model, vrd, yd)
    ratio = np.max(np.abs(x)) / np.max(np.abs(yd))
    _, x_short = perfect_tracking_input(model, vrd, yd[:1001])
    # the state bound is reached early and does not grow with the horizon
    assert ratio < 1.05 * np.max(np.abs(x_short)) / np.max(np.abs(yd[:1001])) + 1e-9
    assert np.isfinite(ratio)


def test_non_minimum_phase_warns(rng):
    model, _, _ = normal_form_model(rng, (1,), 2, zeros=[1.5])
    vrd = vector_relative_degree(model)
    with pytest.warns(RuntimeWarning):
        perfect_tracking_input(model, vrd, np.ones((20, 1)))


def test_singular_decoupling_matrix_rejected():
    model = random_stable_model(np.random.default_rng(3), 3, 2)
    bad = VectorRelativeDegree((1, 1), np.ones((2, 2)))
    with pytest.raises(UndefinedRelativeDegreeError):
        perfect_tracking_input(model, bad, np.ones((10, 2)))


def test_short_reference_rejected(rng):
    model, vrd, _ = random_case(rng)
    with pytest.raises(ValueError):
        perfect_tracking_input(model, vrd, np.zeros((5, model.p)), N=10)


# --- windows ----------------------------------------------------------------------

def test_state_window_scalar_rows():
    x = np.arange(12.0).reshape(6, 2)
    yd = np.arange(6.0)[:, None] * 10
    W = build_window_state(x, yd, (1,))
    assert W.shape == (5, 3)
    for a in range(5):
        assert np.array_equal(W[a], [x[a, 0], x[a, 1], yd[a + 1, 0]])


def test_state_window_shape_for_mixed_degrees():
    x = np.zeros((601, 6))
    yd = np.zeros((601, 3))
    assert build_window_state(x, yd, (1, 1, 2)).shape == (599, 9)


def test_state_window_too_short():
    with pytest.raises(ValueError):
        build_window_state(np.zeros((3, 2)), np.zeros((2, 1)), (2,))


def test_state_window_full_rank_for_rich_reference(rng):
    model, vrd, yd = random_case(rng, length=200)
    _, x = perfect_tracking_input(model, vrd, yd)
    W = build_window_state(x, yd[: x.shape[0]], vrd)
    assert np.linalg.matrix_rank(W) == model.n + model.p


def test_io_window_rows_and_padding():
    u = np.arange(10.0).reshape(5, 2)
    y = -np.arange(10.0).reshape(5, 2)
    yd = np.arange(12.0).reshape(6, 2)
    W = build_window_io(u, y, yd, (1, 1), nbar=2, start=0)
    assert W.shape == (5, 2 * 2 * 2 + 2)
    assert np.array_equal(W[0], np.concatenate([np.zeros(8), yd[1]]))
    assert np.array_equal(W[3], np.concatenate([u[2], u[1], y[2], y[1], yd[4]]))
    assert build_window_io(u, y, yd, (1, 1), nbar=2).shape == (3, 10)


# --- fitting ----------------------------------------------------------------------

def test_fit_recovers_synthetic_parameters(rng):
    W = rng.standard_normal((80, 7))
    theta = rng.standard_normal((7, 3))
    tmap = fit_transfer_map(W, W @ theta, (1, 1, 1))
    assert np.max(np.abs(tmap.theta - theta)) < 1e-8
    assert tmap.residual_norm < 1e-10 and not tmap.rank_deficient and tmap.rank == 7


def test_fit_zero_data_gives_zero_parameters(rng):
    W = rng.standard_normal((30, 4))
    tmap = fit_transfer_map(W, np.zeros((30, 2)), (1, 1))
    assert not tmap.theta.any()


def test_fit_flags_rank_deficiency(rng):
    W = rng.standard_normal((30, 3))
    W = np.hstack([W, W[:, :1]])
    tmap = fit_transfer_map(W, rng.standard_normal((30, 1)), (1,))
    assert tmap.rank_deficient and tmap.rank == 3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(RuntimeWarning):
            fit_transfer_map(W[:2], np.zeros((2, 1)), (1,))


def test_prior_pulls_unexcited_directions(rng):
    W = rng.standard_normal((40, 3))
    W[:, 2] = 0.0  # third parameter never excited
    prior = np.array([[1.0], [2.0], [3.0]])
    truth = np.array([[0.5], [-1.0], [99.0]])
    tmap = fit_transfer_map(W, W @ truth, (1,), prior=prior)
    assert np.allclose(tmap.theta[:2], truth[:2]) and tmap.theta[2, 0] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_transfer_map(W, W @ truth, (1,), prior=np.zeros((2, 1)))


def fit_on(model, vrd, yd):
    u, x = perfect_tracking_input(model, vrd, yd)
    W = build_window_state(x, yd[: u.shape[0] + 1], vrd)
    return fit_transfer_map(W, u[: W.shape[0]], vrd), u


def test_nominal_inverse_matches_noise_free_fit(rng):
    model, vrd, yd = random_case(rng, length=200)
    tmap, _ = fit_on(model, vrd, yd)
    assert np.allclose(tmap.theta, nominal_inverse_theta(model, vrd), atol=1e-8)


@pytest.mark.parametrize("seed", range(15))
def test_map_reproduces_unseen_perfect_tracking_input(seed):
    rng = np.random.default_rng(seed)
    model, vrd, yd_a = random_case(rng, length=200)
    yd_b = smooth_signal(rng, 200, model.p)
    tmap, _ = fit_on(model, vrd, yd_a)
    u_b, x_b = perfect_tracking_input(model, vrd, yd_b)
    W_b = build_window_state(x_b, yd_b[: u_b.shape[0] + 1], vrd)
    pred = tmap.predict(W_b)
    ref = u_b[: W_b.shape[0]]
    assert np.linalg.norm(pred - ref) < 1e-6 * np.linalg.norm(ref)
    tmap_b, _ = fit_on(model, vrd, yd_b)
    assert np.max(np.abs(tmap.theta - tmap_b.theta)) < 1e-6


def test_predicted_inputs_invariant_under_state_coordinates(rng):
    model, vrd, yd = random_case(rng, length=150)
    T = rng.standard_normal((model.n, model.n)) + 3 * np.eye(model.n)
    other = model.transform(T)
    tmap, u = fit_on(model, vrd, yd)
    tmap_t, u_t = fit_on(other, vrd, yd)
    assert np.allclose(u, u_t, atol=1e-9)
    yd_new = smooth_signal(rng, 150, model.p)
    a = apply_transfer_map_online(tmap, yd_new, ModelFeedback(model))
    b = apply_transfer_map_online(tmap_t, yd_new, ModelFeedback(other))
    assert np.allclose(a, b, atol=1e-8)


# --- online application -------------------------------------------------------------

def test_online_self_consistency(rng):
    model, vrd, yd = random_case(rng, length=150)
    tmap, u = fit_on(model, vrd, yd)
    out = apply_transfer_map_online(tmap, yd, ModelFeedback(model))
    assert np.max(np.abs(out - u)) < 1e-6


def test_missing_feedback_aborts_with_step():
    class Broken:
        def __init__(self):
            self.k = 0

        def state(self):
            return None if self.k == 3 else np.zeros(2)

        def output(self):
            return None

        def push(self, u):
            self.k += 1

    tmap = TransferMap("state", np.zeros((3, 1)), (1,))
    with pytest.raises(MissingFeedbackError) as info:
        apply_transfer_map_online(tmap, np.zeros((10, 1)), Broken())
    assert info.value.step == 3


def test_warm_start_from_map_beats_cold_start_on_lifted_model(rng):
    model, vrd, yd_a = random_case(rng, length=80, max_p=2)
    tmap, _ = fit_on(model, vrd, yd_a)
    yd_b = smooth_signal(rng, 80, model.p)
    N = 60
    F = lifted_representation(model, N)
    d = 0.05 * rng.standard_normal(N * model.p)

    def plant(u):
        return (F.F @ np.ravel(u) + d).reshape(-1, model.p)

    u_xfer = apply_transfer_map_online(tmap, yd_b, ModelFeedback(model), N=N)
    target = yd_b[1:N + 1]
    warm = run_ilc(plant, F, IlcConfig(), target, 1, warm_start=u_xfer)
    cold = run_ilc(plant, F, IlcConfig(), target, 1)
    assert warm.errors[0] < cold.errors[0]


def test_transfer_map_round_trip(tmp_path, rng):
    tmap = fit_transfer_map(rng.standard_normal((20, 4)), rng.standard_normal((20, 2)), (1, 2))
    tmap.save(tmp_path / "map.json")
    back = TransferMap.load(tmp_path / "map.json")
    assert np.array_equal(back.theta, tmap.theta) and back.r == tmap.r
    assert back.condition_number == tmap.condition_number
    with pytest.raises(ValueError):
        TransferMap("io", np.zeros((5, 1)), (1,), nbar=3)
    with pytest.raises(ValueError):
        TransferMap("state", np.full((3, 1), np.nan), (1,))


# --- state reconstruction ---------------------------------------------------------

@given(seeds)
def test_reconstructor_recovers_state(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    p = int(rng.integers(1, min(n, 3) + 1))
    model = random_stable_model(rng, n, p)
    rec = state_reconstructor(model)
    assert np.allclose(rec.M_y @ np.vstack([model.C @ np.linalg.matrix_power(model.A, k)
                                            for k in range(n - 1, -1, -1)]),
                       np.linalg.matrix_power(model.A, n), atol=1e-8)
    u = rng.standard_normal((40, p))
    sim = simulate(model, u, rng.standard_normal(n))
    y = np.vstack([model.C @ sim.x[0], sim.y])
    for k in (n, 20, 40):
        x_hat = rec.reconstruct_at(u, y, k)
        assert np.max(np.abs(x_hat - sim.x[k])) < 1e-8 * max(1.0, np.max(np.abs(sim.x[k])))


def test_scalar_reconstructor_by_hand():
    a, b = 0.7, 1.9
    rec = state_reconstructor(StateSpaceModel([[a]], [[b]], [[1.0]]), 1)
    assert rec.M_y == pytest.approx(np.array([[a]]))
    assert rec.M_u == pytest.approx(np.array([[b]]))


def test_unobservable_rejected():
    model = StateSpaceModel(np.diag([0.5, 0.3]), [[1.0], [1.0]], [[1.0, 0.0]])
    with pytest.raises(UnobservableError):
        state_reconstructor(model)
    with pytest.raises(ValueError):
        state_reconstructor(StateSpaceModel(np.eye(1), [[1.0]], [[1.0]]), 1).reconstruct_at(
            np.zeros((3, 1)), np.zeros((3, 1)), 0)


def rest_start(rng, length, p, lead):
    """Smooth signal that is zero for the first ``lead`` samples and ramps in smoothly."""
    raw = smooth_signal(rng, length, p)
    k = np.arange(length) - lead
    w = np.where(k < 0, 0.0, np.where(k < 40, (1 - np.cos(np.pi * np.clip(k, 0, 40) / 40)) / 2, 1.0))
    return raw * w[:, None]


def composed_io_map(state_map, rec):
    """io parameters from the state map through the reconstructor: x = M_u u_past + M_y y_past."""
    n = rec.M_u.shape[0]
    th_x, th_y = state_map.theta[:n], state_map.theta[n:]
    theta = np.vstack([rec.M_u.T @ th_x, rec.M_y.T @ th_x, th_y])
    return TransferMap("io", theta, state_map.r, rec.nbar)


@pytest.mark.parametrize("seed", range(10))
def test_io_and_state_variants_agree(seed):
    rng = np.random.default_rng(seed)
    model, vrd, _ = random_case(rng, max_n=6)
    nbar = model.n
    lead = nbar + vrd.max + 2
    yd = rest_start(rng, 240, model.p, lead)
    state_map, _ = fit_on(model, vrd, yd)
    yd_new = rest_start(rng, 240, model.p, lead)
    a = apply_transfer_map_online(state_map, yd_new, ModelFeedback(model))
    tol = 1e-6 * max(1.0, np.max(np.abs(a)))
    # exact composition through the reconstructor
    b = apply_transfer_map_online(composed_io_map(state_map, state_reconstructor(model, nbar)),
                                  yd_new, ModelFeedback(model))
    assert np.max(np.abs(a - b)) < tol
    # least-squares io map fit on closed-loop data from rest (zero-padded history)
    u, x = perfect_tracking_input(model, vrd, yd)
    W = build_window_io(u, x @ model.C.T, yd[: u.shape[0] + 1], vrd, nbar, start=0)
    io_map = fit_transfer_map(W, u[: W.shape[0]], vrd, variant="io", nbar=nbar)
    c = apply_transfer_map_online(io_map, yd_new, ModelFeedback(model))
    assert np.max(np.abs(a - c)) < tol


# --- different reference models -------------------------------------------------------

def test_identical_reference_models_give_identity_map(rng):
    ref = discretize_reference(2.0, 5.0, 0.01)
    u = smooth_signal(rng, 300, 3)
    assert np.max(np.abs(map_between_reference_models(u, ref, ref) - u)) < 1e-8


@pytest.mark.parametrize("method", ["zoh", "euler"])
def test_mapped_input_reproduces_source_output(rng, method):
    src = discretize_reference(2.0, 5.0, 0.01, method=method)
    tgt = discretize_reference(3.0, 8.0, 0.01, method=method)
    u = smooth_signal(rng, 400, 3)
    u_t = map_between_reference_models(u, src, tgt)
    r = max(vector_relative_degree(tgt).r)
    y_src = simulate(src, u).y
    y_tgt = simulate(tgt, u_t).y
    assert np.max(np.abs(y_tgt[r - 1:] - y_src[r - 1:])) < 1e-6


def test_constant_input_maps_to_same_steady_output():
    src = discretize_reference(2.0, 5.0, 0.01)
    tgt = discretize_reference(3.0, 8.0, 0.01)
    u = np.tile([1.0, -2.0, 0.5], (2000, 1))
    u_t = map_between_reference_models(u, src, tgt)
    assert np.allclose(u_t[-1], u[-1], atol=1e-6)
    assert np.allclose(simulate(tgt, u_t).y[-1], simulate(src, u).y[-1], atol=1e-6)
