"""Schedule, Gaussian transition and sampler tests.

The frozen constant below was computed with 30-digit decimal arithmetic
(mpmath) for the linear schedule T=50, beta from 1e-4 to 0.02.
"""

import math

import numpy as np
import pytest
from scipy import stats

from deskdiff import diffusion
from deskdiff.diffusion import (
    DegenerateStepError,
    SamplerConfig,
    ShapeError,
    build_schedule,
    forward_noise,
    posterior_mean,
    stride_schedule,
    transition_logprob,
)
from deskdiff.vocab import NULL_PROMPT, PromptTokens

# high-precision oracle values for T=50, beta 1e-4 .. 0.02
ALPHA_BAR_50 = 0.60295159732971
SIGMA2_T2 = 8.3508656615098e-5


def test_schedule_alpha_bar_oracle():
    sched = build_schedule(50, 1e-4, 0.02)
    assert abs(sched.alpha_bar[-1] - ALPHA_BAR_50) < 1e-12
    assert abs(sched.sigma[1] ** 2 - SIGMA2_T2) < 1e-16


def test_schedule_basic_structure():
    sched = build_schedule(10, 1e-3, 0.1)
    assert sched.T == 10
    assert np.allclose(sched.alpha, 1.0 - sched.beta)
    assert np.allclose(sched.alpha_bar, np.cumprod(sched.alpha))
    # final reverse step is deterministic
    assert sched.sigma[0] == 0.0
    assert np.all(sched.sigma[1:] > 0.0)
    assert list(sched.timesteps) == list(range(1, 11))


def test_schedule_T1_edge():
    sched = build_schedule(1, 0.01, 0.5)
    assert sched.beta[0] == 0.01
    assert sched.sigma[0] == 0.0


def test_schedule_rejects_bad_args():
    with pytest.raises(ValueError):
        build_schedule(0, 1e-4, 0.02)
    with pytest.raises(ValueError):
        build_schedule(10, 0.02, 1e-4)
    with pytest.raises(ValueError):
        build_schedule(10, 0.0, 0.02)


def test_stride_schedule_alpha_bar_subsequence():
    sched = build_schedule(20, 1e-3, 0.2)
    view = stride_schedule(sched, 5)
    assert view.T == 5
    assert np.allclose(view.alpha_bar, sched.alpha_bar[[3, 7, 11, 15, 19]])
    assert list(view.timesteps) == [4, 8, 12, 16, 20]
    # variances re-derived from the strided alpha_bar ratios
    ab_prev = np.concatenate(([1.0], view.alpha_bar[:-1]))
    sig2 = (1.0 - view.alpha) * (1.0 - ab_prev) / (1.0 - view.alpha_bar)
    assert np.allclose(view.sigma ** 2, sig2)
    assert view.sigma[0] == 0.0


def test_stride_schedule_requires_divisor():
    sched = build_schedule(20, 1e-3, 0.2)
    with pytest.raises(ValueError):
        stride_schedule(sched, 3)
    assert stride_schedule(sched, 20) is sched


def test_forward_noise_formula():
    sched = build_schedule(8, 0.01, 0.2)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((2, 2))
    eps = rng.standard_normal((2, 2))
    for t in range(1, 9):
        ab = sched.alpha_bar[t - 1]
        expect = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
        assert np.allclose(forward_noise(z0, t, eps, sched), expect)
    with pytest.raises(ValueError):
        forward_noise(z0, 0, eps, sched)
    with pytest.raises(ShapeError):
        forward_noise(z0, 1, eps[:1], sched)


def test_forward_noise_marginals():
    """q(z_t | z_0) mean/variance within 4 standard errors over 1e4 draws."""
    sched = build_schedule(10, 0.05, 0.3)
    rng = np.random.default_rng(7)
    z0 = np.array(1.3)
    t = 6
    ab = sched.alpha_bar[t - 1]
    draws = np.array(
        [float(forward_noise(z0, t, e, sched)) for e in rng.standard_normal(10_000)]
    )
    se_mean = math.sqrt(1.0 - ab) / math.sqrt(draws.size)
    assert abs(draws.mean() - math.sqrt(ab) * 1.3) < 4 * se_mean
    # variance of the sample variance of a normal is 2 sigma^4 / (n - 1)
    var = draws.var(ddof=1)
    se_var = math.sqrt(2.0 / (draws.size - 1)) * (1.0 - ab)
    assert abs(var - (1.0 - ab)) < 4 * se_var


def test_transition_logprob_scalar_oracle():
    """Matches the sum of per-entry scipy normal log-densities to 1e-10."""
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = int(rng.integers(1, 8))
        z = rng.standard_normal(d)
        mean = rng.standard_normal(d)
        sigma = float(rng.uniform(0.05, 2.0))
        ours = transition_logprob(z, mean, sigma)
        oracle = float(np.sum(stats.norm.logpdf(z, loc=mean, scale=sigma)))
        assert abs(ours - oracle) < 1e-10


def test_transition_logprob_degenerate():
    z = np.zeros(3)
    with pytest.raises(DegenerateStepError):
        transition_logprob(z, z, 0.0)


def test_posterior_mean_formula():
    sched = build_schedule(5, 0.02, 0.3)
    rng = np.random.default_rng(1)
    z = rng.standard_normal(4)
    eps = rng.standard_normal(4)
    t = 3
    b, a, ab = sched.beta[2], sched.alpha[2], sched.alpha_bar[2]
    expect = (z - b / math.sqrt(1 - ab) * eps) / math.sqrt(a)
    assert np.allclose(posterior_mean(z, t, eps, sched), expect)


def _const_eps_fn(value):
    def eps_fn(z, t, prompt):
        return np.full_like(np.asarray(z, dtype=float), value)

    return eps_fn


def test_ancestral_sample_bit_exact_replay():
    """Hand-rolled T=4 sampler reproduces the trajectory bit for bit."""
    sched = build_schedule(4, 0.05, 0.3)
    prompt = PromptTokens((0,))
    cfg = SamplerConfig(steps=4, guidance_scale=1.0)
    traj = diffusion.ancestral_sample(
        _const_eps_fn(0.25), prompt, cfg, sched, np.random.default_rng(11), shape=(2, 2)
    )
    # replay with an identical generator and explicit formulas
    rng = np.random.default_rng(11)
    z = rng.standard_normal((2, 2))
    states = [z]
    logps = []
    for i in range(4):
        k = 4 - i
        eps = np.full((2, 2), 0.25)
        b, a, ab = sched.beta[k - 1], sched.alpha[k - 1], sched.alpha_bar[k - 1]
        mean = (z - b / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        sig = sched.sigma[k - 1]
        if sig > 0:
            z = mean + sig * rng.standard_normal((2, 2))
            logps.append(transition_logprob(z, mean, float(sig)))
        else:
            z = mean
            logps.append(0.0)
        states.append(z)
    assert len(traj.states) == 5
    for ours, ref in zip(traj.states, states):
        assert np.array_equal(ours, ref)
    assert np.array_equal(traj.logprobs, np.array(logps))


def test_ancestral_sample_guidance_identity():
    """At scale 1 the unconditional branch cancels exactly."""
    calls = []

    def eps_fn(z, t, prompt):
        calls.append(prompt)
        return np.zeros_like(np.asarray(z, dtype=float))

    sched = build_schedule(4, 0.05, 0.3)
    cfg = SamplerConfig(steps=4, guidance_scale=2.0)
    diffusion.ancestral_sample(
        eps_fn, PromptTokens((1,)), cfg, sched, np.random.default_rng(0), shape=(1,)
    )
    # both branches evaluated at every step, null prompt first
    assert len(calls) == 8
    assert calls[0] == NULL_PROMPT


def test_ancestral_sample_no_trajectory():
    sched = build_schedule(4, 0.05, 0.3)
    cfg = SamplerConfig(steps=4, guidance_scale=1.0, record_trajectory=False)
    traj = diffusion.ancestral_sample(
        _const_eps_fn(0.0), PromptTokens((0,)), cfg, sched, np.random.default_rng(5), shape=(2,)
    )
    assert traj.logprobs is None
    assert traj.final.shape == (2,)


def test_strided_sampling_uses_original_timesteps():
    seen = []

    def eps_fn(z, t, prompt):
        seen.append(t)
        return np.zeros_like(np.asarray(z, dtype=float))

    sched = build_schedule(8, 0.02, 0.3)
    cfg = SamplerConfig(steps=4, guidance_scale=1.0)
    diffusion.ancestral_sample(
        eps_fn, PromptTokens((0,)), cfg, sched, np.random.default_rng(0), shape=(1,)
    )
    assert sorted(set(seen)) == [2, 4, 6, 8]


def test_ddpm_loss_zero_for_perfect_model():
    sched = build_schedule(4, 0.05, 0.3)
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((2, 2))
    drawn = {}

    def eps_fn(z, t, prompt):
        return drawn["eps"]

    # peek at the generator's upcoming draws to emulate a perfect predictor
    probe = np.random.default_rng(9)
    t_next = int(probe.integers(1, 5))
    drawn["eps"] = probe.standard_normal((2, 2))
    loss, t, eps = diffusion.ddpm_loss(eps_fn, z0, PromptTokens((0,)), sched, np.random.default_rng(9))
    assert t == t_next
    assert loss == 0.0
    assert np.array_equal(eps, drawn["eps"])


def test_ddpm_loss_value_high_precision_oracle():
    # fixed seed and tiny fixed network; the loss is recomputed with an
    # independent 80-bit forward pass and matched to 1e-8
    from deskdiff import model as dmodel

    arch = dmodel.Architecture(
        height=2, width=2, channels=1, embed_dim=3, time_dim=2,
        hidden=(5,), timesteps=4,
    )
    params = dmodel.init_params(arch, np.random.default_rng(77))
    sched = build_schedule(4, 0.05, 0.3)
    z0 = np.random.default_rng(8).standard_normal(arch.image_shape)
    prompt = PromptTokens((2,))
    rng = np.random.default_rng(91)
    loss, t, eps = diffusion.ddpm_loss(
        dmodel.make_eps_fn(params), z0, prompt, sched, rng
    )

    ld = np.longdouble
    ab = ld(sched.alpha_bar[t - 1])
    z_t = np.sqrt(ab) * z0.astype(ld) + np.sqrt(ld(1.0) - ab) * eps.astype(ld)
    cond = params.tok_emb[[2]].astype(ld).mean(axis=0)
    x = np.concatenate([z_t.reshape(-1), cond, params.t_emb[t - 1].astype(ld)])
    h = np.tanh(params.weights[0].astype(ld) @ x + params.biases[0].astype(ld))
    out = params.weights[1].astype(ld) @ h + params.biases[1].astype(ld)
    diff = out - eps.reshape(-1).astype(ld)
    oracle = float(np.mean(diff * diff))
    assert abs(loss - oracle) <= 1e-8
