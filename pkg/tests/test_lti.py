"""Discrete LTI library: hand-computed examples and randomized properties."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccs_peg import lti
from ccs_peg.controllers import integral_closed_loop_radius, tune_integral

DT = lti.SAMPLE_PERIOD
finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def taps_strategy(max_len=12):
    return arrays(np.float64, st.integers(1, max_len), elements=finite)


@st.composite
def stable_systems(draw, max_states=5, min_radius=0.1, max_radius=0.95):
    n = draw(st.integers(1, max_states))
    seed = draw(st.integers(0, 2**32 - 1))
    rho = draw(st.floats(min_radius, max_radius))
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= rho / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
    B = rng.standard_normal((n, 1))
    C = rng.standard_normal((1, n))
    D = rng.standard_normal((1, 1)) * draw(st.sampled_from([0.0, 0.5]))
    return lti.state_space(A, B, C, D)


def brute_convolve(a, b):
    out = np.zeros(len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


# -- simulate ------------------------------------------------------------------

def test_identity_system_passes_input_through():
    assert np.array_equal(lti.simulate(lti.identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_integrator_impulse_is_delayed_step():
    u = np.zeros(6)
    u[0] = 1.0
    assert np.array_equal(lti.simulate(lti.integrator(), u), [0, 1, 1, 1, 1, 1])


def test_moving_average_step_response():
    y = lti.simulate(lti.fir([0.5, 0.5]), np.ones(5))
    assert np.allclose(y, [0.5, 1.0, 1.0, 1.0, 1.0], atol=0)


def test_state_space_and_fir_simulations_agree():
    h = [0.3, -0.2, 0.7, 0.1]
    u = np.random.default_rng(1).standard_normal(40)
    y_fir = lti.simulate(lti.fir(h), u)
    y_ss = lti.simulate(lti.to_state_space(lti.fir(h)), u)
    assert np.allclose(y_fir, y_ss, atol=1e-14)


def test_simulate_rejects_channel_mismatch():
    with pytest.raises(lti.DimensionError):
        lti.simulate(lti.identity(), np.ones((4, 2)))


def test_simulate_rejects_empty_input():
    with pytest.raises(ValueError):
        lti.simulate(lti.identity(), np.zeros(0))


# -- series --------------------------------------------------------------------

def test_series_of_gains_multiplies():
    s = lti.series(lti.gain(2.0), lti.gain(3.0))
    assert s.dcgain()[0, 0] == pytest.approx(6.0)
    assert s.impulse(3) == pytest.approx([6.0, 0.0, 0.0])


def test_series_of_two_point_sums_is_binomial():
    s = lti.series(lti.fir([1.0, 1.0]), lti.fir([1.0, 1.0]))
    assert np.array_equal(s.impulse(4), [1.0, 2.0, 1.0, 0.0])


def test_series_with_identity_keeps_impulse_response():
    sys = lti.second_order_lag(4.0, 0.8)
    h = sys.impulse(100)
    assert np.allclose(lti.series(sys, lti.identity()).impulse(100), h, atol=1e-15)
    assert np.allclose(lti.series(lti.identity(), sys).impulse(100), h, atol=1e-15)


def test_series_rejects_mixed_sample_periods():
    with pytest.raises(lti.SamplePeriodError):
        lti.series(lti.gain(1.0, dt=DT), lti.gain(1.0, dt=2 * DT))


def test_series_rejects_dimension_mismatch():
    two_out = lti.state_space(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((2, 0)), [[1.0], [1.0]])
    with pytest.raises(lti.DimensionError):
        lti.series(two_out, lti.identity())


@settings(max_examples=50, deadline=None)
@given(taps_strategy(), taps_strategy(), arrays(np.float64, 100, elements=finite))
def test_simulating_a_cascade_equals_simulating_twice(a, b, u):
    sa, sb = lti.to_state_space(lti.fir(a)), lti.to_state_space(lti.fir(b))
    once = lti.simulate(lti.series(sa, sb), u)
    twice = lti.simulate(sb, lti.simulate(sa, u))
    assert np.allclose(once, twice, rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(taps_strategy(), taps_strategy())
def test_cascade_impulse_response_is_convolution(a, b):
    s = lti.series(lti.to_state_space(lti.fir(a)), lti.to_state_space(lti.fir(b)))
    h = s.impulse(100)
    ref = np.zeros(100)
    conv = brute_convolve(a, b)
    ref[:len(conv)] = conv
    assert np.allclose(h, ref, rtol=0, atol=1e-10)


# -- feedback --------------------------------------------------------------------

def test_unity_feedback_of_unit_gain_halves():
    assert lti.feedback(lti.gain(1.0)).dcgain()[0, 0] == pytest.approx(0.5)


def test_unity_feedback_of_zero_gain_is_zero():
    assert lti.feedback(lti.gain(0.0)).dcgain()[0, 0] == 0.0


def test_feedback_rejects_ill_posed_loop():
    with pytest.raises(lti.IllPosedLoopError):
        lti.feedback(lti.gain(-1.0))


def test_integrating_loop_tracks_with_its_time_constant():
    ki, k = 0.2, 10.0  # continuous time constant 1 / (Ki k) = 0.5 s
    tau = 1.0 / (ki * k)
    closed = lti.feedback(lti.integrator(ki * k * DT))
    y = lti.simulate(closed, np.ones(400))
    # a first-order response y = 1 - exp(-t / tau_fit): fit tau from the settled ratio
    n = np.arange(1, 300)
    tau_fit = np.median(-n * DT / np.log(1.0 - y[n]))
    assert tau_fit == pytest.approx(tau, rel=0.02)
    t = np.arange(400) * DT
    assert np.max(np.abs(y - (1 - np.exp(-t / tau)))) < 0.02


@settings(max_examples=50, deadline=None)
@given(stable_systems(), arrays(np.float64, 200, elements=finite))
def test_feedback_output_is_a_fixed_point(loop, u):
    closed = lti.feedback(loop)
    assume(lti.spectral_radius(closed) < 0.99)
    y = lti.simulate(closed, u)
    assume(np.max(np.abs(y)) < 1e6)
    assert np.allclose(y, lti.simulate(loop, u - y), rtol=0, atol=1e-9 * max(1.0, np.max(np.abs(y))))


def test_feedback_pair_matches_feedback_of_cascade():
    fwd = lti.second_order_lag(4.0, 0.8)
    back = lti.delay(2)
    pair = lti.feedback_pair(fwd, back)
    # y = F (u - B y) equals the unity loop around F B seen from u, followed by nothing else
    u = np.random.default_rng(3).standard_normal(150)
    y = lti.simulate(pair, u)
    assert np.allclose(y, lti.simulate(fwd, u - lti.simulate(back, y)), atol=1e-12)


def test_loop_inverse_is_error_map():
    loop = lti.series(lti.gain(0.3), lti.delay(1))
    inv = lti.loop_inverse(loop)
    u = np.random.default_rng(4).standard_normal(80)
    e = lti.simulate(inv, u)
    assert np.allclose(e, u - lti.simulate(loop, e), atol=1e-12)


# -- spectral radius ---------------------------------------------------------------

def test_spectral_radius_of_scalar():
    assert lti.spectral_radius(lti.state_space([[0.5]], [[1.0]], [[1.0]], [[0.0]])) == 0.5


def test_spectral_radius_of_scaled_rotation():
    A = 0.9 * np.array([[0.0, -1.0], [1.0, 0.0]])
    rho = lti.spectral_radius(lti.state_space(A, [[1.0], [0.0]], [[1.0, 0.0]], [[0.0]]))
    assert rho == pytest.approx(0.9, abs=1e-12)


def test_stiff_contact_destabilizes_the_fast_integral_loop(nominal):
    ki = tune_integral(0.17, 10.0)
    assert integral_closed_loop_radius(ki, nominal.with_stiffness(100.0)) > 1.0


@settings(max_examples=50, deadline=None)
@given(stable_systems(max_radius=0.95))
def test_stable_impulse_responses_decay(sys):
    assume(lti.spectral_radius(sys) < 1.0)
    h = sys.impulse(1000)
    early = np.max(np.abs(h[:100]))
    assume(early > 1e-6)
    assert np.max(np.abs(h[500:1000])) < early


# -- frequency response ---------------------------------------------------------------

def test_static_gain_is_flat():
    grid = np.linspace(1.0, math.pi / DT, 20)
    fr = lti.freq_response(lti.gain(2.0), grid)
    assert np.allclose(fr.values, 2.0 + 0j)


def test_unit_delay_is_all_pass_with_linear_phase():
    grid = np.linspace(1.0, 300.0, 30)
    fr = lti.freq_response(lti.to_state_space(lti.delay(1)), grid)
    assert np.allclose(fr.magnitude, 1.0, atol=1e-12)
    assert np.allclose(fr.phase, -grid * DT, atol=1e-12)


def test_moving_average_nulls_nyquist():
    fr = lti.freq_response(lti.fir([0.5, 0.5]), [math.pi / DT])
    assert abs(fr.values[0]) < 1e-15


def test_frequency_grid_must_increase_and_stay_below_nyquist():
    with pytest.raises(ValueError):
        lti.freq_response(lti.gain(1.0), [2.0, 1.0])
    with pytest.raises(ValueError):
        lti.freq_response(lti.gain(1.0), [1.1 * math.pi / DT])


@settings(max_examples=50, deadline=None)
@given(stable_systems(max_radius=0.9))
def test_frequency_response_matches_transform_of_impulse_response(sys):
    grid = np.linspace(0.5, math.pi / DT, 25)
    h = sys.impulse(2000)
    ref = np.exp(-1j * np.outer(grid * DT, np.arange(2000))) @ h
    got = lti.freq_response(sys, grid).values
    assert np.allclose(got, ref, rtol=0, atol=1e-6 * max(1.0, np.max(np.abs(ref))))


# -- conversions ---------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(taps_strategy(20))
def test_fir_state_space_round_trip(taps):
    back = lti.to_fir(lti.to_state_space(lti.fir(taps)))
    n = max(len(taps), len(back.taps))
    a, b = np.zeros(n), np.zeros(n)
    a[:len(taps)], b[:len(back.taps)] = taps, back.taps
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_to_fir_refuses_infinite_responses_without_length():
    with pytest.raises(ValueError):
        lti.to_fir(lti.integrator(0.5))
    assert lti.to_fir(lti.integrator(0.5), 4).taps == pytest.approx([0, 0.5, 0.5, 0.5])


def test_second_order_lag_has_unit_dc_gain():
    assert lti.second_order_lag(4.0, 0.8).dcgain()[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_non_finite_matrices_are_rejected():
    with pytest.raises(ValueError):
        lti.state_space([[math.nan]], [[1.0]], [[1.0]], [[0.0]])
