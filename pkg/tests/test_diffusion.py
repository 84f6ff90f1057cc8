import math

import numpy as np
import pytest

from pcrdiff.diffusion import (
    MAX_BETA,
    cosine_schedule,
    ddpm_step,
    ddpm_step_eps_form,
    draw_sample,
    forward_sample,
    forward_step,
    posterior_mean,
    sample_loop,
    schedule_from_betas,
    schedule_rows,
    timestep_pairs,
)
from pcrdiff.exceptions import BadStepCount, BadStepOrder, StepOutOfRange


def test_cosine_schedule_shape_and_padding():
    sched = cosine_schedule(10)
    assert sched.T == 10
    assert sched.betas.shape == (11,)
    assert sched.betas[0] == 0.0
    assert sched.alpha_bars[0] == 1.0
    assert sched.posterior_vars[0] == 0.0
    assert np.all(np.diff(sched.alpha_bars) < 0.0)
    assert np.all(sched.betas[1:] > 0.0)
    assert np.all(sched.betas <= MAX_BETA)


def test_cosine_schedule_alpha_bar_formula():
    T, s = 50, 0.008
    sched = cosine_schedule(T, s)

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    for t in (1, 10, 25, 40):
        assert sched.alpha_bars[t] == pytest.approx(f(t) / f(0), rel=1e-12)


def test_cosine_schedule_rejects_zero_steps():
    with pytest.raises(BadStepCount):
        cosine_schedule(0)


def test_posterior_variance_matches_definition():
    sched = cosine_schedule(20)
    for t in (1, 5, 20):
        expected = (1 - sched.alpha_bars[t - 1]) / (1 - sched.alpha_bars[t]) * sched.betas[t]
        assert sched.posterior_vars[t] == pytest.approx(expected)
    assert sched.posterior_vars[1] == 0.0


def test_schedule_from_betas_cumulative_product():
    sched = schedule_from_betas([0.1, 0.2, 0.3])
    np.testing.assert_allclose(sched.alpha_bars, [1.0, 0.9, 0.72, 0.504])


def test_forward_sample_zero_noise_and_range():
    sched = cosine_schedule(100)
    g0 = np.arange(7.0)
    out = forward_sample(sched, g0, 1, np.zeros(7))
    np.testing.assert_allclose(out, math.sqrt(sched.alpha_bars[1]) * g0)
    with pytest.raises(StepOutOfRange):
        forward_sample(sched, g0, 0, np.zeros(7))
    with pytest.raises(StepOutOfRange):
        forward_sample(sched, g0, 101, np.zeros(7))


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_forward_sample_moments(t):
    sched = cosine_schedule(1000)
    g0 = np.array([0.9, 0.1, -0.3, 0.2, 1.0, -2.0, 0.5])
    n = 10_000
    eps = np.random.default_rng(1234).standard_normal((n, 7))
    draws = forward_sample(sched, g0, t, eps)
    abar = sched.alpha_bars[t]
    stderr = math.sqrt((1 - abar) / n)
    np.testing.assert_allclose(draws.mean(axis=0), math.sqrt(abar) * g0, rtol=0, atol=3 * stderr)
    np.testing.assert_allclose(draws.var(axis=0), 1 - abar, rtol=0.05)


def test_forward_step_chain_matches_closed_form():
    sched = cosine_schedule(10)
    g0 = np.ones(4)
    g = g0
    for t in range(1, 6):
        g = forward_step(sched, g, t, np.zeros(4))
    np.testing.assert_allclose(g, forward_sample(sched, g0, 5, np.zeros(4)))


def test_forward_step_chain_with_noise_has_closed_form_marginal(rng):
    sched = cosine_schedule(50)
    g0 = rng.normal(size=7)
    noises = rng.normal(size=(20, 7))
    g = g0
    for t in range(1, 21):
        g = forward_step(sched, g, t, noises[t - 1])
    coefs = np.array(
        [math.sqrt(sched.betas[s] * np.prod(sched.alphas[s + 1 : 21])) for s in range(1, 21)]
    )
    expected = math.sqrt(sched.alpha_bars[20]) * g0 + coefs @ noises
    np.testing.assert_allclose(g, expected, atol=1e-12)
    assert float(coefs @ coefs) == pytest.approx(1.0 - sched.alpha_bars[20], abs=1e-12)


def test_ddpm_step_is_linear_in_its_inputs(rng):
    sched = cosine_schedule(100)
    first = [rng.normal(size=7) for _ in range(3)]
    second = [rng.normal(size=7) for _ in range(3)]
    a, b = 0.3, -1.7
    mixed = [a * x + b * y for x, y in zip(first, second)]
    for t_now, t_next in ((60, 59), (60, 20), (5, 0)):
        out = ddpm_step(sched, *mixed[:2], t_now, t_next, mixed[2])
        parts = (
            a * ddpm_step(sched, *first[:2], t_now, t_next, first[2])
            + b * ddpm_step(sched, *second[:2], t_now, t_next, second[2])
        )
        np.testing.assert_allclose(out, parts, atol=1e-12)


def test_draw_sample_range(rng):
    sched = cosine_schedule(5)
    for _ in range(50):
        sample = draw_sample(sched, np.zeros(7), rng)
        assert 1 <= sample.t <= 5
        assert sample.g_t.shape == (7,)


def test_ddpm_step_posterior_and_eps_forms_agree(rng):
    sched = cosine_schedule(1000)
    for _ in range(1000):
        t_now = int(rng.integers(2, 1001))
        t_next = int(rng.integers(1, t_now))
        g_t = rng.normal(size=7)
        g0 = rng.normal(size=7)
        z = rng.normal(size=7)
        a = ddpm_step(sched, g_t, g0, t_now, t_next, z)
        b = ddpm_step_eps_form(sched, g_t, g0, t_now, t_next, z)
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_ddpm_single_step_is_posterior_mean_plus_noise(rng):
    sched = cosine_schedule(50)
    g_t, g0, z = rng.normal(size=(3, 7))
    t = 30
    expected = posterior_mean(sched, g_t, g0, t) + math.sqrt(sched.posterior_vars[t]) * z
    np.testing.assert_allclose(ddpm_step(sched, g_t, g0, t, t - 1, z), expected, atol=1e-12)


def test_ddpm_final_step_returns_prediction(rng):
    sched = cosine_schedule(50)
    g0 = rng.normal(size=7)
    out = ddpm_step(sched, rng.normal(size=7), g0, 7, 0, rng.normal(size=7))
    np.testing.assert_allclose(out, g0, atol=1e-12)


def test_ddpm_step_order():
    sched = cosine_schedule(10)
    with pytest.raises(BadStepOrder):
        ddpm_step(sched, np.zeros(7), np.zeros(7), 3, 3)
    with pytest.raises(StepOutOfRange):
        ddpm_step(sched, np.zeros(7), np.zeros(7), 11, 2)


def test_timestep_pairs():
    assert timestep_pairs(1000, 1) == [(1000, 0)]
    assert timestep_pairs(10, 4) == [(10, 7), (7, 5), (5, 2), (2, 0)]
    assert len(timestep_pairs(10, 10)) == 10
    with pytest.raises(BadStepCount):
        timestep_pairs(10, 0)
    with pytest.raises(BadStepCount):
        timestep_pairs(10, 11)


@pytest.mark.parametrize("steps", [1, 4, 100])
def test_sample_loop_with_oracle_denoiser(steps, rng):
    sched = cosine_schedule(100)
    g0 = np.array([1.0, 0.0, 0.0, 0.0, 0.1, -0.2, 0.3])
    calls = []

    def oracle(g_t, t, conditioning):
        calls.append(t)
        return g0

    out = sample_loop(oracle, sched, steps, None, rng)
    np.testing.assert_allclose(out, g0, atol=1e-9)
    assert len(calls) == steps
    assert calls[0] == 100


def test_schedule_rows():
    rows = schedule_rows(cosine_schedule(10))
    assert len(rows) == 10
    assert [row[0] for row in rows] == list(range(1, 11))
    assert all(a[2] > b[2] for a, b in zip(rows, rows[1:]))
