import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from levytd.problems import highdim, pure_jump_1d, robustness_1d
from levytd.stochastic import (
    Bernoulli,
    ConstantVector,
    DivergentIntegralError,
    Exponential,
    Normal,
    SimulationDiverged,
    Uniform,
    UnsupportedLawError,
    compensator_exp_moment,
    compensator_mean,
    law_from_name,
    sample_jump_size,
    sample_jump_times,
    simulate_batch,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def poisson_counts(lam, n, seed=0):
    r = rng(seed)
    return np.array([len(sample_jump_times(lam, 1.0, r)) for _ in range(n)])


# --- laws ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [lambda: Normal(0.0, 0.0), lambda: Uniform(-1.0), lambda: Exponential(0.0), lambda: Bernoulli(0, 1, 1.5), lambda: ConstantVector(0.1, 0)],
)
def test_law_invariants_enforced(bad):
    with pytest.raises(ValueError):
        bad()


def test_sample_supports():
    r = rng()
    assert np.all(Exponential(3.0).sample(r, 1000) >= 0)
    u = Uniform(0.4).sample(r, 1000)
    assert np.all(np.abs(u) <= 0.4)
    assert set(np.unique(Bernoulli(-0.2, 0.4, 0.7).sample(r, 1000))) <= {-0.2, 0.4}


def test_constant_vector_draw():
    assert sample_jump_size(ConstantVector(0.1, 3), rng()).tolist() == [0.1, 0.1, 0.1]


def test_bernoulli_frequency():
    draws = Bernoulli(-0.2, 0.4, 0.7).sample(rng(1), 100_000)
    assert np.mean(draws == -0.2) == pytest.approx(0.7, abs=0.01)


def test_normal_moments():
    draws = Normal(0.4, 0.25).sample(rng(2), 100_000)
    assert np.mean(draws) == pytest.approx(0.4, abs=0.005)
    assert np.std(draws) == pytest.approx(0.25, abs=0.005)


def test_law_from_name_defaults_and_errors():
    assert law_from_name("normal") == Normal(0.4, 0.25)
    assert law_from_name("uniform") == Uniform(0.4)
    assert law_from_name("exponential") == Exponential(3.0)
    assert law_from_name("bernoulli") == Bernoulli(-0.2, 0.4, 0.7)
    assert law_from_name("constant", d=4) == ConstantVector(0.1, 4)
    with pytest.raises(ValueError):
        law_from_name("cauchy")
    with pytest.raises(ValueError):
        law_from_name("normal", [0.1])


# --- compensators -------------------------------------------------------------


# frozen from a 30-digit mpmath evaluation of the closed forms, cross-checked by mpmath quadrature
NORMAL_EXP_MOMENT = 0.539180296935722792685734508346
BERNOULLI_EXP_MOMENT = 0.0206589364469683964164107418845


def test_compensator_examples():
    assert compensator_exp_moment(Exponential(3.0)) == pytest.approx(0.5, abs=1e-15)
    assert compensator_exp_moment(Normal(0.4, 0.25)) == pytest.approx(NORMAL_EXP_MOMENT, abs=1e-15)
    assert compensator_exp_moment(Bernoulli(-0.2, 0.4, 0.7)) == pytest.approx(BERNOULLI_EXP_MOMENT, abs=1e-15)
    assert compensator_exp_moment(Uniform(0.4)) == pytest.approx(math.sinh(0.4) / 0.4 - 1, abs=1e-15)


def test_compensator_errors():
    with pytest.raises(DivergentIntegralError):
        compensator_exp_moment(Exponential(1.0))
    with pytest.raises(UnsupportedLawError):
        compensator_exp_moment(ConstantVector(0.1, 2))


def _quad_exp_moment(law):
    """Independent quadrature of E[e^Z] - 1 straight from the densities."""
    f = lambda z: math.expm1(z)  # noqa: E731
    if isinstance(law, Normal):
        pdf = lambda z: math.exp(-0.5 * ((z - law.mu) / law.sigma) ** 2) / (law.sigma * math.sqrt(2 * math.pi))  # noqa: E731
        lo, hi = law.mu - 40 * law.sigma, law.mu + 40 * law.sigma
        return integrate.quad(lambda z: f(z) * pdf(z), lo, hi, points=[law.mu], epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    if isinstance(law, Uniform):
        return integrate.quad(lambda z: f(z) / (2 * law.delta), -law.delta, law.delta, epsabs=1e-13)[0]
    if isinstance(law, Exponential):
        pdf = lambda z: law.rate * math.exp(-law.rate * z)  # noqa: E731
        return integrate.quad(lambda z: f(z) * pdf(z), 0, 80 / law.rate, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return law.p * f(law.a1) + (1 - law.p) * f(law.a2)


@pytest.mark.parametrize("law", [Normal(0.4, 0.25), Uniform(0.4), Exponential(3.0), Bernoulli(-0.2, 0.4, 0.7)])
def test_compensator_matches_quadrature(law):
    assert abs(compensator_exp_moment(law) - _quad_exp_moment(law)) < 1e-8
    assert abs(law.integrate(math.expm1) - _quad_exp_moment(law)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(0.05, 1))
def test_normal_compensator_property(mu, sigma):
    law = Normal(mu, sigma)
    assert abs(compensator_exp_moment(law) - _quad_exp_moment(law)) < 1e-8


def test_compensator_mean():
    assert compensator_mean(ConstantVector(0.1, 3)).tolist() == [0.1, 0.1, 0.1]
    assert compensator_mean(Uniform(0.4)) == 0
    assert compensator_mean(Exponential(3.0)) == pytest.approx(1 / 3)


# --- jump times ---------------------------------------------------------------


def test_zero_intensity_has_no_jumps():
    assert len(sample_jump_times(0.0, 1.0, rng())) == 0


@pytest.mark.parametrize("lam, T", [(-0.1, 1.0), (0.3, 0.0), (0.3, -1.0)])
def test_jump_time_parameter_errors(lam, T):
    with pytest.raises(ValueError):
        sample_jump_times(lam, T, rng())


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 20), st.floats(0.1, 3), st.integers(0, 2**31))
def test_jump_times_strictly_increasing_in_horizon(lam, T, seed):
    t = sample_jump_times(lam, T, rng(seed))
    assert np.all(np.diff(t) > 0)
    assert np.all((t > 0) & (t <= T))


def test_poisson_mean_low_intensity():
    assert poisson_counts(0.3, 100_000, seed=3).mean() == pytest.approx(0.3, abs=0.01)


def test_poisson_mean_and_variance_high_intensity():
    counts = poisson_counts(1.8, 100_000, seed=4)
    assert counts.mean() == pytest.approx(1.8, abs=0.02)
    assert counts.var() == pytest.approx(1.8, abs=0.05)


# --- forward simulation ---------------------------------------------------------


def test_batch_shapes_and_initial_state():
    p = robustness_1d(theta=0.4)
    b = simulate_batch(p, 7, 5, 11)
    assert b.states.shape == (7, 6, 1)
    assert b.brownian.shape == (7, 5, 1)
    assert np.all(b.states[:, 0] == p.xi)
    assert b.dt == pytest.approx(0.2)
    for path in b.jumps:
        times = [r.time for r in path]
        assert times == sorted(times)


def test_brownian_increment_variance():
    b = simulate_batch(robustness_1d(theta=0.4), 2000, 20, 5)
    assert np.var(b.brownian) == pytest.approx(b.dt, rel=0.03)


def test_zero_jump_paths_follow_compensator_drift():
    p = pure_jump_1d()
    b = simulate_batch(p, 200, 50, 6)
    quiet = b.jump_counts() == 0
    assert quiet.any()
    factor = 1 - b.dt * p.lam * compensator_exp_moment(p.law)
    expected = factor ** np.arange(51)
    assert np.allclose(b.states[quiet, :, 0], expected, rtol=0, atol=1e-14)


def test_jumps_use_state_frozen_at_interval_start():
    p = pure_jump_1d(lam=4.0)
    b = simulate_batch(p, 300, 10, 7)
    kappa = compensator_exp_moment(p.law)
    for n in range(b.N):
        x = b.states[:, n, 0]
        jump = np.zeros(b.M)
        traj, size = b.step_jumps(n)
        np.add.at(jump, traj, x[traj] * np.expm1(size[:, 0]))
        assert np.allclose(b.states[:, n + 1, 0], x + jump - b.dt * p.lam * kappa * x, atol=1e-13)


def test_no_dynamics_keeps_state_fixed():
    p = robustness_1d(epsilon=0.0, theta=0.0, lam=0.0)
    b = simulate_batch(p, 5, 8, 0)
    assert np.all(b.states == 1.0)
    assert b.jump_counts().sum() == 0


def test_left_open_binning_on_grid_point():
    from levytd.stochastic import _step_index

    assert _step_index(np.array([0.2, 0.21, 1.0, 1e-9]), 0.2, 5).tolist() == [0, 1, 4, 0]


def test_martingale_of_compensated_process():
    b = simulate_batch(pure_jump_1d(), 100_000, 50, 8)
    xT = b.states[:, -1, 0]
    assert abs(xT.mean() - 1.0) < 3 * xT.std(ddof=1) / math.sqrt(b.M)


def test_jump_counts_match_poisson_in_batch():
    b = simulate_batch(pure_jump_1d(), 100_000, 10, 9)
    counts = b.jump_counts()
    se_mean = math.sqrt(0.3 / b.M)
    se_var = math.sqrt((0.3 + 2 * 0.3**2) / b.M)  # Poisson fourth central moment
    assert abs(counts.mean() - 0.3) < 3 * se_mean
    assert abs(counts.var(ddof=1) - 0.3) < 3 * se_var


def test_determinism_across_workers():
    p = highdim(d=5)
    a = simulate_batch(p, 64, 10, np.random.SeedSequence(2023, spawn_key=(0, 3)), workers=1)
    b = simulate_batch(p, 64, 10, np.random.SeedSequence(2023, spawn_key=(0, 3)), workers=4)
    for field in ("states", "brownian", "jump_traj", "jump_step", "jump_time", "jump_size"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_different_seeds_differ():
    p = robustness_1d(theta=0.4)
    assert not np.array_equal(simulate_batch(p, 4, 5, 1).brownian, simulate_batch(p, 4, 5, 2).brownian)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_trajectory_and_step():
    p = robustness_1d(epsilon=1e308, theta=0.0, lam=0.0)
    with pytest.raises(SimulationDiverged) as err:
        simulate_batch(p, 3, 4, 0)
    assert err.value.step >= 0 and err.value.trajectory >= 0
