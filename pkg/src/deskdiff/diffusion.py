"""Diffusion-process mathematics.

Implements the forward noising process, the reverse-step Gaussian
transition (mean, variance and log-density), the training loss for noise
prediction, and a guided ancestral sampler that records full trajectories
with per-step behavior log-probabilities.

Conventions:
- Timesteps are 1-based in the API (t = 1 .. T); internal tables are
  0-indexed so beta[t-1] is the coefficient at timestep t.
- The reverse-step variance is the forward-posterior variance
  sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
  with alpha_bar_0 = 1, which makes the final step (t = 1) deterministic.
- Classifier-free guidance uses eps_hat = eps_u + s * (eps_c - eps_u),
  with the null prompt as unconditional input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .vocab import NULL_PROMPT, PromptTokens

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when tensor shapes disagree."""


class DegenerateStepError(ValueError):
    """Raised when a log-density is requested for a zero-variance step."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-timestep diffusion constants.

    ``timesteps`` maps each table position to the timestep index of the
    base schedule it was derived from; for a freshly built schedule it is
    simply 1..T. Strided inference schedules keep the original indices so
    the denoiser sees the timestep it was trained on.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError("T must be positive")
        for name in ("beta", "alpha", "alpha_bar", "sigma", "timesteps"):
            if len(getattr(self, name)) != self.T:
                raise ValueError(f"{name} must have length T")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("beta must lie in (0, 1)")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be nonnegative")


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a linear-beta schedule with DDPM posterior variances.

    beta[t] interpolates linearly from beta_start to beta_end; when T = 1
    the single beta is beta_start.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # alpha_bar_{t-1} with alpha_bar_0 = 1
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    sigma = np.sqrt(sigma2)
    timesteps = np.arange(1, T + 1, dtype=np.int64)
    sched = NoiseSchedule(T, beta, alpha, alpha_bar, sigma, timesteps)
    sched.validate()
    return sched


def stride_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly strided inference subsequence of a base schedule.

    Requires steps to divide T. Per-stride alpha is the ratio of
    consecutive alpha_bar values along the subsequence, and the posterior
    variances are recomputed from the strided alpha_bar ratios.
    """
    if not 1 <= steps <= sched.T:
        raise ValueError("steps must lie in [1, T]")
    if sched.T % steps != 0:
        raise ValueError(f"steps={steps} does not evenly divide T={sched.T}")
    if steps == sched.T:
        return sched
    stride = sched.T // steps
    idx = np.arange(1, steps + 1) * stride - 1  # 0-based positions of kept timesteps
    alpha_bar = sched.alpha_bar[idx]
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    alpha = alpha_bar / alpha_bar_prev
    beta = 1.0 - alpha
    sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(
        T=steps,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=np.sqrt(sigma2),
        timesteps=sched.timesteps[idx].copy(),
    )


@dataclass
class SamplerConfig:
    """Ancestral-sampler settings."""

    steps: int
    guidance_scale: float = 7.5
    record_trajectory: bool = True


@dataclass
class Trajectory:
    """A full reverse chain z_T .. z_0 with behavior log-probabilities.

    ``states[0]`` is the initial Gaussian draw and ``states[-1]`` the final
    image; ``logprobs[i]`` is the log-density of the transition from
    states[i] to states[i+1] under the guided Gaussian used at collection
    time. The deterministic final step carries a 0.0 placeholder (it has
    no density and is skipped by consumers).
    """

    prompt: PromptTokens
    states: list = field(default_factory=list)
    logprobs: np.ndarray | None = None
    reward: float | None = None
    guidance_scale: float = 0.0
    seed: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ShapeError(f"shape mismatch: {np.shape(a)} vs {shape}")


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """q(z_t | z_0): sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z0, eps)
    ab = sched.alpha_bar[t - 1]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(z_t: np.ndarray, t: int, eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Mean of the reverse transition given a noise prediction.

    mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z_t, eps_pred)
    b = sched.beta[t - 1]
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    return (z_t - (b / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a)


def transition_logprob(z_prev: np.ndarray, mean: np.ndarray, sigma_t: float) -> float:
    """Log-density of an isotropic Gaussian N(mean, sigma_t^2 I) at z_prev."""
    if sigma_t <= 0.0:
        raise DegenerateStepError("sigma_t must be positive for a log-density")
    _check_shapes(z_prev, mean)
    d = np.size(z_prev)
    resid = np.asarray(z_prev, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    quad = float(np.sum(resid * resid)) / (2.0 * sigma_t * sigma_t)
    return -0.5 * d * (LOG_2PI + 2.0 * math.log(sigma_t)) - quad


def guided_eps(eps_fn, z: np.ndarray, t: int, prompt: PromptTokens, scale: float) -> np.ndarray:
    """Classifier-free guided noise prediction.

    eps_hat = eps_uncond + scale * (eps_cond - eps_uncond), with the null
    prompt as the unconditional input.
    """
    eps_u = eps_fn(z, t, NULL_PROMPT)
    eps_c = eps_fn(z, t, prompt)
    return eps_u + scale * (eps_c - eps_u)


def ancestral_sample(
    eps_fn,
    prompt: PromptTokens,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    shape: tuple = None,
    seed: int = 0,
) -> Trajectory:
    """Run guided ancestral sampling and record the trajectory.

    Draws z_T ~ N(0, I), then for each schedule position k = K..1 samples
    z_{k-1} ~ N(posterior_mean(z_k, eps_hat), sigma_k^2 I). Noise draws
    happen only for stochastic steps, in a fixed order (initial state
    first, then one per stochastic step). When ``cfg.steps`` is below the
    base T the evenly strided subsequence with re-derived variances is
    used; the denoiser is always called with original timestep indices.
    """
    if shape is None:
        raise ValueError("sample shape must be provided")
    view = stride_schedule(sched, cfg.steps)
    K = view.T
    s = cfg.guidance_scale
    z = rng.standard_normal(shape)
    states = [z]
    logprobs = np.zeros(K, dtype=np.float64)
    for i in range(K):
        k = K - i  # schedule position, K .. 1
        t_orig = int(view.timesteps[k - 1])
        eps_hat = guided_eps(eps_fn, z, t_orig, prompt, s)
        mean = posterior_mean(z, k, eps_hat, view)
        sig = view.sigma[k - 1]
        if sig > 0.0:
            z = mean + sig * rng.standard_normal(shape)
            if cfg.record_trajectory:
                logprobs[i] = transition_logprob(z, mean, sig)
        else:
            z = mean
        states.append(z)
    return Trajectory(
        prompt=prompt,
        states=states,
        logprobs=logprobs if cfg.record_trajectory else None,
        guidance_scale=s,
        seed=seed,
    )


def ddpm_loss(
    eps_fn,
    z0: np.ndarray,
    prompt: PromptTokens,
    sched: NoiseSchedule,
    rng: np.random.Generator,
):
    """Single-example noise-prediction loss.

    Samples t uniform on {1..T} and eps ~ N(0, I); returns the entrywise
    mean squared error between eps and the model prediction, along with
    the sampled (t, eps) so the caller can recompute gradients.
    """
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(np.shape(z0))
    z_t = forward_noise(z0, t, eps, sched)
    pred = eps_fn(z_t, t, prompt)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    return loss, t, eps
