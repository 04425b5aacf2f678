"""Policy-gradient fine-tuning of a personalized model.

The reverse diffusion chain is treated as a multi-step MDP whose policy
is the per-step guided Gaussian transition. Each epoch collects reward-
scored trajectories from an immutable snapshot, normalizes advantages
within each prompt group, and takes clipped importance-sampled gradient
steps on the LoRA adapters only; the base parameters never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion, model, optim, world
from .diffusion import NoiseSchedule, SamplerConfig, Trajectory
from .model import DenoiserParams, LoraAdapter
from .optim import OptimizerState
from .vocab import ID_TOKEN, PromptTokens, WORD_TO_ID


class NumericError(RuntimeError):
    """A non-finite quantity was encountered during optimization."""


@dataclass
class PGConfig:
    """Policy-gradient fine-tuning settings."""

    prompt_id: PromptTokens
    prompt_plain: PromptTokens
    rollouts: int = 16
    minibatch: int = 8
    grad_steps: int = 2
    clip_range: float = 1e-4
    lr: float = 2e-5
    lr_final: float = 0.0
    epochs: int = 30
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(50, 7.5))
    mix_prob: float = 0.5
    kl_coef: float = 0.0
    strip_identifier: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.minibatch > self.rollouts:
            raise ValueError("minibatch cannot exceed rollouts per epoch")
        if self.clip_range <= 0:
            raise ValueError("clip range must be positive")
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ValueError("mixing probability must lie in [0, 1]")


@dataclass
class RolloutBatch:
    """Scored trajectories for one epoch, plus normalized advantages."""

    trajectories: list[Trajectory]
    epoch: int
    advantages: np.ndarray | None = None


def build_rl_prompts(class_noun: str, activity: str) -> tuple[PromptTokens, PromptTokens]:
    """Prompt pair differing only by the identifier token."""
    for w in (class_noun, activity):
        if w not in WORD_TO_ID:
            raise ValueError(f"unknown word {w!r}")
    base = (WORD_TO_ID[class_noun], WORD_TO_ID[activity])
    return PromptTokens((ID_TOKEN,) + base), PromptTokens(base)


def collect_rollouts(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    cfg: PGConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    epoch: int = 0,
) -> RolloutBatch:
    """Sample and score one epoch of trajectories from a fixed snapshot.

    Prompt choice and per-rollout seeds are drawn up front from ``rng``;
    each rollout then runs on its own generator, so results are
    independent of any worker fan-out and gathered by rollout index.
    """
    shape = params.arch.image_shape
    n = cfg.rollouts
    use_id = rng.random(n) < cfg.mix_prob
    seeds = rng.integers(0, 2**63 - 1, size=n)
    prompts = [cfg.prompt_id if use_id[i] else cfg.prompt_plain for i in range(n)]
    rngs = [np.random.default_rng(int(seeds[i])) for i in range(n)]
    conds = np.stack([model.embed_prompt(params, p) for p in prompts])

    # all rollouts advance in lockstep so each denoiser call is one
    # batched matrix product; noise draws still come from per-rollout
    # generators in the same order as single-trajectory sampling
    view = diffusion.stride_schedule(sched, cfg.sampler.steps)
    K = view.T
    s = cfg.sampler.guidance_scale
    Z = np.stack([r.standard_normal(shape).reshape(-1) for r in rngs])
    states = [[z.reshape(shape)] for z in Z]
    for i in range(K):
        k = K - i
        t_orig = np.full(n, int(view.timesteps[k - 1]))
        out_c = model.batch_eps(params, adapters, Z, t_orig, conds)
        out_u = model.batch_eps(params, adapters, Z, t_orig, np.zeros_like(conds))
        eps_hat = out_u + s * (out_c - out_u)
        b = view.beta[k - 1]
        a = view.alpha[k - 1]
        ab = view.alpha_bar[k - 1]
        mean = (Z - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
        sig = view.sigma[k - 1]
        if sig > 0.0:
            noise = np.stack([r.standard_normal(shape).reshape(-1) for r in rngs])
            Z = mean + sig * noise
        else:
            Z = mean
        for j in range(n):
            states[j].append(Z[j].reshape(shape))

    trajectories = []
    for j in range(n):
        traj = Trajectory(
            prompt=prompts[j],
            states=states[j],
            logprobs=np.zeros(K),
            guidance_scale=s,
            seed=int(seeds[j]),
        )
        traj.reward = world.reward(traj.final, prompts[j], cfg.strip_identifier)
        trajectories.append(traj)

    # behavior log-densities are recomputed through the same batched code
    # path the surrogate gradient uses, so a fresh policy reproduces them
    # bit for bit and the importance ratios start at exactly one
    terms = _gather_terms(trajectories, view)
    if terms is not None:
        idx, Z_t, Z_prev, positions, scales = terms
        term_conds = np.stack(
            [model.embed_prompt(params, trajectories[j].prompt) for j, _ in idx]
        )
        logps, _ = model.batch_transition_stats(
            params, adapters, Z_t, Z_prev, positions, view, term_conds, scales
        )
        for (j, i), lp in zip(idx, logps):
            trajectories[j].logprobs[i] = lp
    return RolloutBatch(trajectories, epoch)


def _gather_terms(trajectories: list[Trajectory], view: NoiseSchedule):
    """Flatten the stochastic transitions of a trajectory list.

    Returns (index pairs, Z_t, Z_prev, positions, scales) with one row
    per (trajectory, step) term, or None when every step is
    deterministic. Index pairs are (trajectory index, state index).
    """
    K = view.T
    idx, Zt, Zp, pos, scales = [], [], [], [], []
    for j, traj in enumerate(trajectories):
        for i in range(K):
            p = K - i
            if view.sigma[p - 1] <= 0.0:
                continue
            idx.append((j, i))
            Zt.append(np.asarray(traj.states[i]).reshape(-1))
            Zp.append(np.asarray(traj.states[i + 1]).reshape(-1))
            pos.append(p)
            scales.append(traj.guidance_scale)
    if not idx:
        return None
    return idx, np.stack(Zt), np.stack(Zp), np.array(pos), np.array(scales)


def normalize_advantages(batch: RolloutBatch, eps: float = 1e-8) -> RolloutBatch:
    """Standardize rewards within each prompt group (identifier / plain)."""
    rewards = np.array([t.reward for t in batch.trajectories], dtype=np.float64)
    if np.any(~np.isfinite(rewards)):
        raise NumericError("non-finite reward in rollout batch")
    has_id = np.array([t.prompt.has_identifier() for t in batch.trajectories])
    adv = np.zeros_like(rewards)
    for flag in (True, False):
        idx = np.nonzero(has_id == flag)[0]
        if idx.size == 0:
            continue
        if idx.size == 1:
            adv[idx] = 0.0
            continue
        group = rewards[idx]
        adv[idx] = (group - group.mean()) / (group.std() + eps)
    batch.advantages = adv
    return batch


def pg_gradient(
    params: DenoiserParams,
    adapters: list[LoraAdapter],
    trajectories: list[Trajectory],
    advantages: np.ndarray,
    clip_range: float,
    sched: NoiseSchedule,
    steps: int,
    kl_coef: float = 0.0,
):
    """Clipped-surrogate policy gradient over a minibatch.

    For every stochastic step the current-policy log-density of the
    stored transition is recomputed; the per-step loss term is
    -min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) with
    rho = exp(logp_current - logp_behavior). The returned gradient is the
    average over all (trajectory, step) terms. Stats report the exact
    clip fraction (terms with rho outside the band) and mean ratio.
    """
    view = diffusion.stride_schedule(sched, steps)
    for traj in trajectories:
        if traj.logprobs is None:
            raise ValueError("trajectory was collected without log-probabilities")
    terms = _gather_terms(trajectories, view)
    if terms is None:
        raise ValueError("minibatch contains no stochastic steps")
    idx, Z_t, Z_prev, positions, scales = terms
    conds = np.stack([model.embed_prompt(params, trajectories[j].prompt) for j, _ in idx])
    logps, aux = model.batch_transition_stats(
        params, adapters, Z_t, Z_prev, positions, view, conds, scales
    )
    behavior = np.array([trajectories[j].logprobs[i] for j, i in idx])
    adv = np.array([advantages[j] for j, _ in idx])
    ratio = np.exp(logps - behavior)
    if np.any(~np.isfinite(ratio)):
        bad = int(np.argmax(~np.isfinite(ratio)))
        raise NumericError(
            f"non-finite importance ratio at step {positions[bad]} "
            f"(logp={logps[bad]:.3g}, behavior={behavior[bad]:.3g})"
        )
    n_terms = ratio.size
    outside = (ratio < 1.0 - clip_range) | (ratio > 1.0 + clip_range)
    clip_ratio = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
    # d(-min)/d(logp) is -adv*ratio on the unclipped branch, 0 otherwise
    coefs = np.where(ratio * adv <= clip_ratio * adv, -adv * ratio, 0.0)
    if kl_coef != 0.0:
        # penalty kl_coef * (logp_current - logp_frozen); the frozen term
        # is constant wrt the adapters, so only the current log-density
        # contributes to the gradient
        coefs = coefs + kl_coef
    grad = model.batch_transition_grad(params, adapters, aux, coefs)
    for key in grad:
        grad[key] = grad[key] / n_terms
    stats = {
        "mean_ratio": float(np.sum(ratio) / n_terms),
        "clip_fraction": float(np.count_nonzero(outside) / n_terms),
        "mean_reward": float(np.mean([t.reward for t in trajectories])),
    }
    return grad, stats


def pg_step(
    params: DenoiserParams,
    adapters: list[LoraAdapter],
    trajectories: list[Trajectory],
    advantages: np.ndarray,
    clip_range: float,
    sched: NoiseSchedule,
    steps: int,
    state: OptimizerState,
    kl_coef: float = 0.0,
):
    """One clipped-surrogate gradient step on the adapters."""
    grad, stats = pg_gradient(
        params, adapters, trajectories, advantages, clip_range, sched, steps, kl_coef
    )
    pdict = optim.trainable_dict(params, adapters, "lora")
    optim.adamw_step(pdict, grad, state)
    return stats


def run_rl(
    params: DenoiserParams,
    cfg: PGConfig,
    sched: NoiseSchedule,
    lora_rank: int = 4,
    lora_alpha: float = 8.0,
):
    """Full RL fine-tuning loop.

    Attaches fresh adapters (zero delta), then per epoch: collect, score,
    normalize advantages, and take the configured number of gradient
    steps on random minibatches. Returns (adapters, curve rows) where each
    row is (epoch, mean_reward_id, mean_reward_all, clip_fraction,
    mean_ratio). Base parameters are never modified.
    """
    rng = np.random.default_rng(cfg.seed)
    adapters = model.attach_lora(
        params, list(range(len(params.weights))), lora_rank, lora_alpha, rng
    )
    for ad in adapters:
        ad.enabled = True
    pdict = optim.trainable_dict(params, adapters, "lora")
    state = optim.init_optimizer(pdict, lr=cfg.lr)
    rows = []
    for epoch in range(cfg.epochs):
        if cfg.lr_final > 0.0:
            frac = 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
            state.lr = cfg.lr_final + (cfg.lr - cfg.lr_final) * frac
        batch = collect_rollouts(params, adapters, cfg, sched, rng, epoch)
        normalize_advantages(batch)
        clip_fracs, ratios = [], []
        for _ in range(cfg.grad_steps):
            idx = rng.choice(cfg.rollouts, size=cfg.minibatch, replace=False)
            stats = pg_step(
                params,
                adapters,
                [batch.trajectories[j] for j in idx],
                batch.advantages[idx],
                cfg.clip_range,
                sched,
                cfg.sampler.steps,
                state,
                cfg.kl_coef,
            )
            clip_fracs.append(stats["clip_fraction"])
            ratios.append(stats["mean_ratio"])
        rewards_id = [t.reward for t in batch.trajectories if t.prompt.has_identifier()]
        rewards_all = [t.reward for t in batch.trajectories]
        rows.append(
            (
                epoch,
                float(np.mean(rewards_id)) if rewards_id else float("nan"),
                float(np.mean(rewards_all)),
                float(np.mean(clip_fracs)),
                float(np.mean(ratios)),
            )
        )
    return adapters, rows
