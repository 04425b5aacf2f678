"""Policy-gradient machinery: rollouts, advantages, clipped surrogate."""

import math

import numpy as np
import pytest

from deskdiff import diffusion, model, optim, rl
from deskdiff.diffusion import SamplerConfig
from deskdiff.model import Architecture
from deskdiff.rl import (
    NumericError,
    PGConfig,
    RolloutBatch,
    build_rl_prompts,
    collect_rollouts,
    normalize_advantages,
    pg_gradient,
    run_rl,
)
from deskdiff.vocab import ID_TOKEN, PromptTokens

from conftest import TINY_ARCH, make_tiny

SMALL_ARCH = Architecture(hidden=(32,), timesteps=4)


def small_cfg(**kw):
    prompt_id, prompt_plain = build_rl_prompts("plushie", "pens")
    base = dict(
        prompt_id=prompt_id,
        prompt_plain=prompt_plain,
        rollouts=6,
        minibatch=3,
        grad_steps=1,
        clip_range=1e-4,
        lr=1e-3,
        epochs=2,
        sampler=SamplerConfig(4, 1.5),
        mix_prob=0.5,
        seed=0,
    )
    base.update(kw)
    return PGConfig(**base)


def setup_model(seed=0, enable_lora=True):
    rng = np.random.default_rng(seed)
    params = model.init_params(SMALL_ARCH, rng)
    sched = diffusion.build_schedule(4, 0.05, 0.3)
    adapters = model.attach_lora(params, [0, 1], 2, 4.0, rng)
    if enable_lora:
        for ad in adapters:
            ad.enabled = True
    return params, adapters, sched


def test_build_rl_prompts():
    pid, plain = build_rl_prompts("plushie", "pens")
    assert pid.has_identifier() and not plain.has_identifier()
    assert pid.without_identifier() == plain
    with pytest.raises(ValueError):
        build_rl_prompts("zebra", "pens")


def test_pgconfig_validation():
    with pytest.raises(ValueError):
        small_cfg(minibatch=7)
    with pytest.raises(ValueError):
        small_cfg(clip_range=0.0)
    with pytest.raises(ValueError):
        small_cfg(mix_prob=1.5)


def test_collect_rollouts_deterministic_and_scored():
    params, adapters, sched = setup_model()
    cfg = small_cfg()
    a = collect_rollouts(params, adapters, cfg, sched, np.random.default_rng(4))
    b = collect_rollouts(params, adapters, cfg, sched, np.random.default_rng(4))
    assert len(a.trajectories) == 6
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert ta.prompt == tb.prompt
        assert np.array_equal(ta.final, tb.final)
        assert ta.reward == tb.reward
        assert 0.0 <= ta.reward <= 1.0
        assert ta.logprobs is not None


def test_collect_rollouts_mixing_extremes():
    params, adapters, sched = setup_model()
    all_id = collect_rollouts(
        params, adapters, small_cfg(mix_prob=1.0), sched, np.random.default_rng(0)
    )
    assert all(t.prompt.has_identifier() for t in all_id.trajectories)
    none_id = collect_rollouts(
        params, adapters, small_cfg(mix_prob=0.0), sched, np.random.default_rng(0)
    )
    assert not any(t.prompt.has_identifier() for t in none_id.trajectories)


def test_normalize_advantages_groupwise():
    pid, plain = build_rl_prompts("plushie", "pens")
    trajs = []
    for reward, prompt in [(0.2, pid), (0.8, pid), (0.5, plain), (0.5, plain), (0.9, plain)]:
        t = diffusion.Trajectory(prompt=prompt)
        t.reward = reward
        trajs.append(t)
    batch = normalize_advantages(RolloutBatch(trajs, 0))
    adv = batch.advantages
    id_group = np.array([0.2, 0.8])
    expect = (id_group - id_group.mean()) / (id_group.std() + 1e-8)
    assert np.allclose(adv[:2], expect)
    plain_group = np.array([0.5, 0.5, 0.9])
    expect_p = (plain_group - plain_group.mean()) / (plain_group.std() + 1e-8)
    assert np.allclose(adv[2:], expect_p)


def test_normalize_advantages_singleton_zero():
    pid, plain = build_rl_prompts("plushie", "pens")
    t1 = diffusion.Trajectory(prompt=pid)
    t1.reward = 0.7
    t2 = diffusion.Trajectory(prompt=plain)
    t2.reward = 0.1
    batch = normalize_advantages(RolloutBatch([t1, t2], 0))
    assert np.array_equal(batch.advantages, np.zeros(2))


def test_normalize_advantages_rejects_nonfinite():
    pid, _ = build_rl_prompts("plushie", "pens")
    t = diffusion.Trajectory(prompt=pid)
    t.reward = float("nan")
    with pytest.raises(NumericError):
        normalize_advantages(RolloutBatch([t], 0))


def direct_reinforce_gradient(params, adapters, trajectories, advantages, sched, steps):
    """Score-function gradient written out directly: -mean(adv * grad logp)."""
    view = diffusion.stride_schedule(sched, steps)
    K = view.T
    total = {}
    n = 0
    for traj, adv in zip(trajectories, advantages):
        for i in range(K):
            pos = K - i
            if view.sigma[pos - 1] <= 0.0:
                continue
            _, g = model.backprop_logprob(
                params, adapters, traj.states[i], traj.states[i + 1], pos, view,
                traj.prompt, traj.guidance_scale, trainable="lora",
            )
            n += 1
            for key, val in g.items():
                total[key] = total.get(key, 0.0) + (-adv) * val
    return {k: v / n for k, v in total.items()}


def test_surrogate_matches_reinforce_at_unit_ratio():
    """With fresh adapters the ratios are exactly 1 and the clipped
    surrogate reduces to the plain score-function estimator."""
    params, adapters, sched = setup_model()
    cfg = small_cfg()
    batch = collect_rollouts(params, adapters, cfg, sched, np.random.default_rng(2))
    normalize_advantages(batch)
    grad, stats = pg_gradient(
        params, adapters, batch.trajectories, batch.advantages, cfg.clip_range, sched, 4
    )
    assert stats["mean_ratio"] == pytest.approx(1.0, abs=1e-12)
    assert stats["clip_fraction"] == 0.0
    direct = direct_reinforce_gradient(
        params, adapters, batch.trajectories, batch.advantages, sched, 4
    )
    assert set(grad) == set(direct)
    for key in grad:
        assert np.max(np.abs(grad[key] - direct[key])) < 1e-10, key


def test_clip_fraction_exact_brute_force():
    params, adapters, sched = setup_model()
    cfg = small_cfg(clip_range=1e-3)
    batch = collect_rollouts(params, adapters, cfg, sched, np.random.default_rng(3))
    normalize_advantages(batch)
    # drift the policy so ratios leave 1
    rng = np.random.default_rng(9)
    for ad in adapters:
        ad.B[:] = 2e-4 * rng.standard_normal(ad.B.shape)
    _, stats = pg_gradient(
        params, adapters, batch.trajectories, batch.advantages, cfg.clip_range, sched, 4
    )
    # brute-force recount from recomputed log-densities
    total, outside = 0, 0
    for traj in batch.trajectories:
        logps = model.trajectory_logprobs(params, adapters, traj, sched, 4)
        for i in range(4):
            if sched.sigma[3 - i] <= 0.0:
                continue
            total += 1
            ratio = math.exp(logps[i] - traj.logprobs[i])
            if not (1 - cfg.clip_range <= ratio <= 1 + cfg.clip_range):
                outside += 1
    assert total > 0
    assert stats["clip_fraction"] == pytest.approx(outside / total, abs=1e-12)


def test_pg_gradient_requires_logprobs():
    params, adapters, sched = setup_model()
    traj = diffusion.Trajectory(prompt=PromptTokens((0,)))
    traj.reward = 0.5
    with pytest.raises(ValueError):
        pg_gradient(params, adapters, [traj], np.array([1.0]), 1e-4, sched, 4)


def test_run_rl_base_frozen_and_curve():
    params, _, sched = setup_model()
    before = params.copy()
    cfg = small_cfg(epochs=2)
    adapters, rows = run_rl(params, cfg, sched, lora_rank=2, lora_alpha=4.0)
    # base parameters are bit-identical after a full RL run
    assert np.array_equal(params.tok_emb, before.tok_emb)
    assert np.array_equal(params.t_emb, before.t_emb)
    for a, b in zip(params.weights, before.weights):
        assert np.array_equal(a, b)
    for a, b in zip(params.biases, before.biases):
        assert np.array_equal(a, b)
    # adapters actually moved
    assert any(np.any(ad.B != 0.0) for ad in adapters)
    assert len(rows) == 2
    for epoch, r_id, r_all, clip_frac, mean_ratio in rows:
        assert 0.0 <= r_all <= 1.0
        assert 0.0 <= clip_frac <= 1.0


def test_run_rl_deterministic():
    params, _, sched = setup_model()
    cfg = small_cfg(epochs=2)
    ad1, rows1 = run_rl(params.copy(), cfg, sched, lora_rank=2, lora_alpha=4.0)
    ad2, rows2 = run_rl(params.copy(), cfg, sched, lora_rank=2, lora_alpha=4.0)
    assert rows1 == rows2
    for a, b in zip(ad1, ad2):
        assert np.array_equal(a.A, b.A)
        assert np.array_equal(a.B, b.B)


def test_prompt_mixing_binomial_bound():
    rng = np.random.default_rng(2)
    params = make_tiny(rng)
    sched = diffusion.build_schedule(TINY_ARCH.timesteps, 0.05, 0.3)
    cfg = rl.PGConfig(
        prompt_id=PromptTokens((ID_TOKEN, 0)),
        prompt_plain=PromptTokens((0,)),
        rollouts=16,
        minibatch=8,
        mix_prob=0.5,
        sampler=SamplerConfig(TINY_ARCH.timesteps, 1.5),
    )
    epochs = 100
    count = 0
    for epoch in range(epochs):
        batch = rl.collect_rollouts(params, None, cfg, sched, rng, epoch)
        count += sum(t.prompt.has_identifier() for t in batch.trajectories)
    n = epochs * cfg.rollouts
    sigma = math.sqrt(n * 0.25)
    assert abs(count - n * 0.5) <= 4.0 * sigma
