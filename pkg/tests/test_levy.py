import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from slowfit.levy import (
    FORWARD,
    STATIONARY,
    SeededStream,
    StableNoiseSpec,
    default_burn_in,
    empirical_cf,
    hill_estimator,
    increment,
    linear_recursion,
    sample_stable,
    simulate_stationary,
)

SPEC = StableNoiseSpec(1.8, 1.0, 1)


@pytest.mark.parametrize("alpha", [1.0, 2.0, 0.5, 2.5, float("nan")])
def test_alpha_outside_open_interval_rejected(alpha):
    with pytest.raises(ValueError):
        StableNoiseSpec(alpha)


@pytest.mark.parametrize("kw", [{"sigma": -0.1}, {"sigma": float("inf")}, {"dim": 0}, {"dim": 1.5}])
def test_bad_intensity_or_dim_rejected(kw):
    with pytest.raises(ValueError):
        StableNoiseSpec(1.5, **kw)


def test_seed_range():
    SeededStream(2**64 - 1)
    with pytest.raises(ValueError):
        SeededStream(2**64)
    with pytest.raises(ValueError):
        SeededStream(-1)


def test_same_stream_same_samples_and_children_independent():
    a = sample_stable(SPEC, SeededStream(7, 3), 100)
    b = sample_stable(SPEC, SeededStream(7, 3), 100)
    assert np.array_equal(a, b)
    c = sample_stable(SPEC, SeededStream(7, 4), 100)
    d = sample_stable(SPEC, SeededStream(7, 3), 100, child=FORWARD)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert STATIONARY != FORWARD


def test_samples_independent_of_thread_scheduling():
    streams = [SeededStream(11, j) for j in range(8)]
    serial = [sample_stable(SPEC, s, 1000) for s in streams]
    out = [None] * 8

    def work(j):
        out[j] = sample_stable(SPEC, streams[j], 1000)

    threads = [threading.Thread(target=work, args=(j,)) for j in reversed(range(8))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(serial, out):
        assert np.array_equal(a, b)


def test_cf_at_zero_is_one_and_decays():
    x = sample_stable(SPEC, SeededStream(0), 10_000)
    assert empirical_cf(x, 0.0) == 1.0
    assert abs(empirical_cf(x, 1e5)) < 0.05


def test_cf_matches_closed_form():
    x = sample_stable(StableNoiseSpec(1.5), SeededStream(1), 200_000)
    for u in (0.3, 1.0, 1.7):
        assert abs(empirical_cf(x, u) - np.exp(-abs(u) ** 1.5)) < 0.01


@pytest.mark.parametrize("alpha", [1.3, 1.8])
def test_distribution_matches_reference_cdf(alpha):
    # reference cdf from scipy's numerical inversion of the characteristic function
    x = sample_stable(StableNoiseSpec(alpha), SeededStream(2), 2000)[:, 0]
    assert stats.kstest(x, stats.levy_stable(alpha, 0.0).cdf).pvalue > 1e-3


def test_increment_scaling_identity():
    s = SeededStream(3)
    assert np.array_equal(increment(SPEC, 1.0, s, 50), sample_stable(SPEC, s, 50))
    with pytest.raises(ValueError):
        increment(SPEC, 0.0, s)


def test_two_increments_match_one_double_increment_in_law():
    dt = 0.01
    a = increment(SPEC, dt, SeededStream(4, 0), 4000) + increment(SPEC, dt, SeededStream(4, 1), 4000)
    b = increment(SPEC, 2 * dt, SeededStream(4, 2), 4000)
    assert stats.ks_2samp(a[:, 0], b[:, 0]).pvalue > 1e-3


def test_stationary_zero_increments_give_zero_path():
    t = 0.01 * np.arange(11)
    burn = default_burn_in(np.array([[-1.0]]))
    n_steps = int(np.ceil(burn / 0.01 - 1e-9)) + 10
    path = simulate_stationary(-np.eye(1), SPEC, t, SeededStream(0), increments=np.zeros((n_steps, 1)))
    assert np.all(path.values == 0.0)
    with pytest.raises(ValueError):
        simulate_stationary(-np.eye(1), SPEC, t, SeededStream(0), increments=np.zeros((3, 1)))


def test_stationary_rejects_unstable_and_bad_grids():
    t = 0.01 * np.arange(5)
    with pytest.raises(ValueError):
        simulate_stationary(np.eye(1), SPEC, t, SeededStream(0))
    with pytest.raises(ValueError):
        simulate_stationary(-np.eye(1), SPEC, np.array([0.0, 0.01, 0.03]), SeededStream(0))
    with pytest.raises(ValueError):
        simulate_stationary(-np.eye(1), SPEC, t, SeededStream(0), dt=0.003)


def test_stationary_marginal_is_stable_with_known_scale():
    # z = int e^{-(t-s)} dL(s) is stable with scale (1/alpha)^(1/alpha)
    a = SPEC.alpha
    t = np.array([0.0, 0.5])
    vals = np.array(
        [simulate_stationary(-np.eye(1), SPEC, t, SeededStream(5, j), dt=0.01).values[:, 0] for j in range(600)]
    )
    scale = (1.0 / a) ** (1.0 / a)
    ref = stats.levy_stable(a, 0.0, scale=scale).cdf
    assert stats.kstest(vals[:, 0], ref).pvalue > 1e-3
    # stationarity: the law at t=0.5 is the same
    assert stats.kstest(vals[:, 1], ref).pvalue > 1e-3
    assert abs(np.median(vals[:, 0])) < 0.1


def test_fast_scaled_path_matches_unscaled_law():
    # eta^eps(t) has the law of xi(t/eps)
    eps = 0.05
    t = np.array([0.0, 0.1])
    fast = np.array(
        [simulate_stationary(-np.eye(1), SPEC, t, SeededStream(6, j), dt=0.001, eps=eps).values[0, 0] for j in range(500)]
    )
    slow = np.array(
        [simulate_stationary(-np.eye(1), SPEC, t, SeededStream(7, j), dt=0.02).values[0, 0] for j in range(500)]
    )
    assert stats.ks_2samp(fast, slow).pvalue > 1e-3


def test_hill_on_pareto():
    rng = np.random.default_rng(0)
    x = rng.pareto(1.7, 200_000) + 1.0
    assert abs(hill_estimator(x, 0.01) - 1.7) < 0.05
    with pytest.raises(ValueError):
        hill_estimator(x[:100], 1e-3)


def test_symmetry():
    x = sample_stable(SPEC, SeededStream(8), 100_000)[:, 0]
    assert abs(np.mean(x > 0) - 0.5) < 0.01
    assert abs(np.median(x)) < 0.02


def test_multivariate_coordinates_independent_and_shaped():
    x = sample_stable(StableNoiseSpec(1.6, 1.0, 3), SeededStream(9), 5000)
    assert x.shape == (5000, 3)
    # sign agreement between coordinates is at chance level
    assert abs(np.mean(np.sign(x[:, 0]) == np.sign(x[:, 1])) - 0.5) < 0.03


@given(
    m=st.floats(-0.99, 0.99),
    forcing=st.lists(st.floats(-10, 10), min_size=1, max_size=30),
)
def test_linear_recursion_matches_loop(m, forcing):
    f = np.array(forcing)[:, None]
    z, want = 0.0, []
    for v in forcing:
        z = m * z + v
        want.append(z)
    got = linear_recursion(np.array([[m]]), f)[:, 0]
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10)


def test_linear_recursion_full_matrix():
    M = np.array([[0.5, 0.1], [-0.2, 0.3]])
    f = np.random.default_rng(1).standard_normal((20, 2))
    z = np.zeros(2)
    for k in range(20):
        z = M @ z + f[k]
    assert np.allclose(linear_recursion(M, f)[-1], z)


@given(seed=st.integers(0, 2**64 - 1), sid=st.integers(0, 2**45))
def test_stream_reproducible_for_any_seed(seed, sid):
    s = SeededStream(seed, sid)
    assert np.array_equal(sample_stable(SPEC, s, 5), sample_stable(SPEC, SeededStream(seed, sid), 5))
    assert s.as_dict() == {"seed": seed, "stream_id": sid}
