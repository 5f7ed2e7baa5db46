import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevforecast.gridcore import GridSpec, cell_to_metric_arrays
from bevforecast.markov import Belief, BeliefLost, init_from_observations, predict, run_baseline

from markov_oracle import dense_predict

SPEC16 = GridSpec(16, 0.25)


def _belief(p, v, spec=SPEC16):
    return Belief(spec, p / p.sum(), v)


def test_identity_transition(rng):
    p = rng.random((16, 16))
    b = predict(_belief(p, (0.0, 0.0)), 0.0)
    assert np.allclose(b.p, p / p.sum(), atol=1e-15)


def test_pure_shift():
    p = np.zeros((16, 16))
    p[10, 10] = 1
    b = predict(_belief(p, (0.0, 2.0)), 0.0)
    assert b.p[10, 12] == pytest.approx(1.0)


def test_init_examples():
    b = init_from_observations([(1.0, 2.0)] * 5, GridSpec(64, 0.25))
    assert b.velocity == (0.0, 0.0)
    assert b.p.sum() == pytest.approx(1.0, abs=1e-9)
    pts = [(0.0, 1.0 + 0.5 * i) for i in range(6)]
    assert init_from_observations(pts, GridSpec(64, 0.25)).velocity == pytest.approx((0.0, 2.0))
    with pytest.raises(ValueError):
        init_from_observations([(0.0, 1.0)], SPEC16)


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_oracle(seed):
    r = np.random.default_rng(seed)
    p = r.random((16, 16))
    v = tuple(r.uniform(-3, 3, 2))
    s = r.uniform(0.2, 1.5)
    assert np.max(np.abs(predict(_belief(p, v), s).p - dense_predict(p / p.sum(), v, s))) < 1e-10


@given(st.integers(0, 2**31), st.floats(0.0, 2.0))
def test_normalization_and_monotone_peak(seed, sigma):
    r = np.random.default_rng(seed)
    b = init_from_observations([(0.3, 1.0), (0.1, 1.6)], GridSpec(32, 0.25), sigma_obs_cells=1.0 + r.random())
    peak = b.p.max()
    for _ in range(5):
        b = predict(b, sigma)
        assert b.p.sum() == pytest.approx(1.0, abs=1e-9)
        assert (b.p >= 0).all()
        if sigma > 0:
            assert b.p.max() <= peak + 1e-12
        peak = b.p.max()


def _cv_track(n, start, vel):
    return np.array([start]) + np.arange(n)[:, None] * np.array([vel])


def test_translation_equivariance():
    spec = GridSpec(64, 0.25)
    past = _cv_track(10, (1.0, 2.0), (0.05, 0.3))
    a = run_baseline(past, spec, 12)
    shift = np.array([-1.0, 1.5])  # whole cells: 4 rows down, 6 columns right
    b = run_baseline(past + shift, spec, 12)
    assert np.allclose(b - a, shift)


@pytest.mark.parametrize("vel", [(0.0, 0.9), (0.12, 0.6), (-0.2, 1.1)])
def test_constant_velocity_tracked(vel):
    spec = GridSpec(512, 0.25)
    track = _cv_track(60, (0.0, 2.0), vel)
    pred = run_baseline(track[:20], spec, 40)
    err = np.abs(pred - track[20:]).max(axis=1)
    assert err.max() <= spec.resolution_m + 1e-9


def test_horizon_zero_and_lost_belief():
    assert run_baseline(_cv_track(5, (0, 1), (0, 0.5)), SPEC16, 0).shape == (0, 2)
    b = init_from_observations(_cv_track(3, (0.0, 3.0), (0.0, 1.0)), SPEC16)
    with pytest.raises(BeliefLost):
        for _ in range(20):
            b = predict(b, 0.0)


def test_argmax_position_is_cell_center():
    p = np.zeros((16, 16))
    p[3, 9] = 1
    x, z = cell_to_metric_arrays(3, 9, SPEC16)
    assert _belief(p, (0.0, 0.0)).argmax_position() == pytest.approx((float(x), float(z)))
