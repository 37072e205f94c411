import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from oracles import transition_np
from sssnav.errors import NoCrossing, NonPositiveDt
from sssnav.geometry import Landmark, VehicleState, crossing
from sssnav.models import (
    ControlInput,
    Detection,
    DetectionSet,
    DrivingNoiseParams,
    MeasurementNoiseParams,
    aux_log_likelihood,
    clutter_density,
    detection_likelihood,
    detection_probability,
    sample_driving_noise,
    transition,
)

S0 = VehicleState(0, 0, 0, 5)
ZERO = (0.0, 0.0, 0.0, 0.0)


def test_transition_examples():
    assert transition(S0, ControlInput(2, 0), ZERO, 1.0).as_array() == pytest.approx([2, 0, 0, 5])
    out = transition(S0, ControlInput(math.pi / 2, math.pi / 2), ZERO, 1.0)
    assert out.as_array() == pytest.approx([1, 1, math.pi / 2, 5], abs=1e-12)
    out = transition(S0, ControlInput(1, 0), (0, 0, 0, -0.3), 1.0)
    assert out.as_array() == pytest.approx([1, 0, 0, 4.7])


def test_transition_rejects_bad_dt():
    with pytest.raises(NonPositiveDt):
        transition(S0, ControlInput(1, 0), ZERO, 0.0)


def test_transition_clamps_altitude():
    assert transition(S0, ControlInput(1, 0), (0, 0, 0, -9), 1.0).gamma == 0.0


@given(st.floats(-math.pi, math.pi), st.floats(0.1, 3), st.sampled_from([1e-7, -1e-7]))
def test_transition_continuous_across_turn_guard(th, speed, eps):
    s = VehicleState(1.0, -2.0, th, 5.0)
    a = transition(s, ControlInput(speed, eps), ZERO, 1.0)
    b = transition(s, ControlInput(speed, 0.0), ZERO, 1.0)
    assert math.hypot(a.x - b.x, a.y - b.y) < 1e-6


@given(
    st.floats(-math.pi, math.pi), st.floats(0, 30), st.floats(-3, 3), st.floats(-1, 1),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
)
def test_transition_invariants(th, gam, us, ut, n):
    out = transition(VehicleState(0, 0, th, gam), ControlInput(us, ut), n, 0.5)
    assert -math.pi < out.theta <= math.pi
    assert out.gamma >= 0.0


def test_transition_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    n = rng.normal(size=(200, 4)) * [0.3, 0.4, 0.2, 0.1]
    ref = transition_np(1.0, 2.0, 0.3, 5.0, 1.5, 0.2, n, 0.7)
    got = np.array([transition(VehicleState(1, 2, 0.3, 5), ControlInput(1.5, 0.2), row, 0.7).as_array() for row in n])
    assert np.allclose(got, ref, atol=1e-12)


def test_transition_monte_carlo_moments():
    # noise only on speed and altitude, straight motion: moments are analytic
    p = DrivingNoiseParams(0.3, 0.0, 0.0, 0.2)
    rng = np.random.default_rng(7)
    n = sample_driving_noise(p, rng, size=1_000_000)
    out = transition_np(0.0, 0.0, 0.0, 5.0, 1.0, 0.0, n, 1.0)
    se = np.array([0.3, 0.2]) / 1000
    assert abs(out[:, 0].mean() - 1.0) < 3 * se[0]
    assert abs(out[:, 3].mean() - 5.0) < 3 * se[1]
    assert out[:, 0].std() == pytest.approx(0.3, rel=5e-3)


def test_detection_probability():
    p = MeasurementNoiseParams()
    m = Landmark(0, 0, 10, 0, 2, 2)
    assert detection_probability(S0, m, p) == 0.95
    assert detection_probability(S0, Landmark(1, 30, 0, 0, 2, 2), p) == 0.0
    # rotating the vehicle sweeps the footprint off the landmark
    assert detection_probability(VehicleState(0, 0, math.pi / 2, 5), m, p) == 0.0


def test_detection_likelihood_examples():
    m = Landmark(0, 0, 10, 0, 2, 2)
    c = crossing(S0, m, 20)
    z = Detection(c.near_signed, c.far_signed)
    assert detection_likelihood(z, S0, m, MeasurementNoiseParams(sigma_d=1.0)) == pytest.approx(0.159155, abs=1e-6)
    p = MeasurementNoiseParams(sigma_d=0.75)
    assert detection_likelihood(z, S0, m, p) == pytest.approx(0.282942, abs=1e-6)
    z2 = Detection(c.near_signed + 0.75, c.far_signed + 0.75)
    assert detection_likelihood(z2, S0, m, p) == pytest.approx(0.104089, abs=1e-6)
    with pytest.raises(NoCrossing):
        detection_likelihood(z, S0, Landmark(1, 30, 0, 0, 2, 2), p)


def test_detection_likelihood_integrates_to_one():
    m = Landmark(0, 0, 10, 0, 2, 2)
    c = crossing(S0, m, 20)
    p = MeasurementNoiseParams(sigma_d=0.75)
    h = 6 * 0.75
    val, _ = integrate.dblquad(
        lambda b, a: detection_likelihood(Detection(a, b), S0, m, p),
        c.near_signed - h, c.near_signed + h, c.far_signed - h, c.far_signed + h,
    )
    assert val == pytest.approx(1.0, abs=1e-3)


def test_clutter_density():
    assert clutter_density(Detection(3, 5), MeasurementNoiseParams(r_max=20)) == pytest.approx(6.25e-4)
    assert clutter_density(Detection(-10, -12), MeasurementNoiseParams(r_max=30)) == pytest.approx(2.7778e-4, rel=1e-4)
    assert clutter_density(Detection(25, 26), MeasurementNoiseParams(r_max=20)) == 0.0
    ordered = MeasurementNoiseParams(r_max=20, clutter_model="ordered")
    assert clutter_density(Detection(3, 5), ordered) == pytest.approx(2 * 6.25e-4)
    assert clutter_density(Detection(5, 3), ordered) == 0.0


def test_clutter_density_integrates_to_one():
    for model in ("uniform", "ordered"):
        p = MeasurementNoiseParams(r_max=20, clutter_model=model)
        # analytic: support area times level
        area = 1600.0 if model == "uniform" else 800.0
        assert area * p.clutter_level == pytest.approx(1.0)


def test_aux_log_likelihood_examples():
    p = MeasurementNoiseParams(sigma_c=0.1, sigma_h=0.25)
    base = aux_log_likelihood(DetectionSet((), 0.0, 5.0), S0, p)
    assert base == pytest.approx(math.log(3.989423) + math.log(1.595769), abs=1e-6)
    assert aux_log_likelihood(DetectionSet((), 2 * math.pi, 5.0), S0, p) == pytest.approx(base)
    assert aux_log_likelihood(DetectionSet((), 0.0, 5.25), S0, p) == pytest.approx(base - 0.5)


def test_params_validation():
    with pytest.raises(ValueError):
        MeasurementNoiseParams(p_det=0.0)
    with pytest.raises(ValueError):
        MeasurementNoiseParams(mu_c=-1)
    with pytest.raises(ValueError):
        DrivingNoiseParams(-0.1, 0, 0, 0)
    assert MeasurementNoiseParams(sigma_d_overrides={3: 2.0}).sigma_d_for(3) == 2.0


def test_detection_set_roundtrip():
    z = np.array([[1.0, 2.0], [-3.0, -4.0]])
    d = DetectionSet.from_array(z, 0.1, 5.0, 1.5)
    assert len(d) == 2
    assert np.array_equal(d.as_array(), z)
    assert DetectionSet((), 0, 5).as_array().shape == (0, 2)
