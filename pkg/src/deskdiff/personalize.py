"""Base pretraining and subject personalization.

Stage 0 trains the denoiser on the synthetic world's prompt-image pairs
(with unconditional dropout so the sampler can apply classifier-free
guidance). Stage 1 binds the reserved identifier token to a specific
subject from a handful of reference images, while a prior-preservation
term trains on the model's own class-conditioned generations to keep the
class concept intact. Both loss terms carry equal unit weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion, model, optim, world
from .diffusion import NoiseSchedule, SamplerConfig
from .model import DenoiserParams
from .optim import OptimizerState
from .vocab import ID_TOKEN, MODIFIERS, NULL_PROMPT, PromptTokens, WORD_TO_ID


@dataclass
class PersonalizationConfig:
    """Settings for one personalization run."""

    class_noun: str
    description: str | None = None
    reference_images: list = field(default_factory=list)
    prior_size: int = 32
    lr: float = 2e-5
    steps: int = 400
    train_embeddings: bool = True
    use_prior: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.reference_images) <= 6:
            raise ValueError("need 1..6 reference images")
        if self.description is not None and self.description not in MODIFIERS:
            raise ValueError(f"description {self.description!r} is not a known modifier")
        if self.use_prior and self.prior_size < 1:
            raise ValueError("prior set must be nonempty")


def pretrain_base(
    params: DenoiserParams,
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    null_prob: float,
    rng: np.random.Generator,
    lr_final: float = 0.0,
    snr_weighting: bool = False,
    aug_prob: float = 0.0,
) -> list[float]:
    """Train the denoiser in place on world samples; returns the loss log.

    Per example, the prompt is replaced by the null prompt with
    probability ``null_prob`` so the unconditional branch is trained too.
    When ``lr_final`` is positive the learning rate follows a cosine
    decay from ``lr`` down to ``lr_final``; otherwise it stays constant.

    ``snr_weighting`` multiplies each example's loss by
    (1 - abar_t) / abar_t (normalized to mean 1 over timesteps), which
    shifts capacity toward the high-noise steps that dominate sampler
    error accumulation.

    ``aug_prob`` enables off-distribution state augmentation: with that
    probability a conditional example's input state is built from a
    shrunk clean image (factor lam) and rescaled noise (factor sc),
    z = sqrt(abar) lam x0 + sqrt(1-abar) sc eps, mimicking the signal
    deficit and noise excess the sampler's own states exhibit. Because a
    full prompt determines its scene exactly, the matching prediction
    target sc eps + sqrt(abar)(lam-1) x0 / sqrt(1-abar) is exact. The
    lam range is bounded per timestep so the correction term never
    exceeds 0.4 x0, and sc grows toward low timesteps where sampler
    noise excess is largest.
    """
    pdict = optim.trainable_dict(params, None, "full", train_embeddings=True)
    state = optim.init_optimizer(pdict, lr=lr)
    losses = []
    if snr_weighting:
        w_t = (1.0 - sched.alpha_bar) / sched.alpha_bar
        w_t = w_t / w_t.mean()
    coef_t = np.sqrt(sched.alpha_bar) / np.sqrt(1.0 - sched.alpha_bar)
    lam_lo = np.maximum(0.0, 1.0 - 0.4 / coef_t)
    sc_hi = 1.0 + 2.0 * (1.0 - sched.timesteps / sched.T)
    for step in range(steps):
        if lr_final > 0.0:
            frac = 0.5 * (1.0 + np.cos(np.pi * step / steps))
            state.lr = lr_final + (lr - lr_final) * frac
        zs, ts, prompts, targets = [], [], [], []
        for _ in range(batch_size):
            image, tokens = world.sample_pretrain_example(rng)
            null = rng.random() < null_prob
            if null:
                tokens = NULL_PROMPT
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(image.shape)
            if aug_prob > 0.0 and not null and rng.random() < aug_prob:
                ab = sched.alpha_bar[t - 1]
                lam = rng.uniform(lam_lo[t - 1], 1.02)
                sc = rng.uniform(1.0, sc_hi[t - 1])
                eps_s = sc * eps
                z = np.sqrt(ab) * lam * image + np.sqrt(1.0 - ab) * eps_s
                target = eps_s + np.sqrt(ab) * (lam - 1.0) * image / np.sqrt(1.0 - ab)
            else:
                z = diffusion.forward_noise(image, t, eps, sched)
                target = eps
            zs.append(z)
            ts.append(t)
            prompts.append(tokens)
            targets.append(target)
        weights = w_t[np.asarray(ts) - 1] if snr_weighting else None
        loss, grad = model.batch_backprop_mse(
            params, None, zs, ts, prompts, targets, "full", weights=weights
        )
        optim.adamw_step(pdict, grad, state)
        losses.append(loss)
    return losses


def build_personalization_prompt(
    class_noun: str, description: str | None = None
) -> tuple[PromptTokens, PromptTokens]:
    """(identifier prompt c, bare class prompt c_pr)."""
    if class_noun not in WORD_TO_ID:
        raise ValueError(f"unknown class noun {class_noun!r}")
    toks = [ID_TOKEN]
    if description is not None:
        if description not in WORD_TO_ID:
            raise ValueError(f"unknown description {description!r}")
        toks.append(WORD_TO_ID[description])
    toks.append(WORD_TO_ID[class_noun])
    return PromptTokens(tuple(toks)), PromptTokens((WORD_TO_ID[class_noun],))


def generate_prior_set(
    params: DenoiserParams,
    c_pr: PromptTokens,
    n: int,
    sampler: SamplerConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """n independent class-conditioned samples from the base model."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eps_fn = model.make_eps_fn(params)
    cfg = SamplerConfig(sampler.steps, sampler.guidance_scale, record_trajectory=False)
    shape = params.arch.image_shape
    return [
        diffusion.ancestral_sample(eps_fn, c_pr, cfg, sched, rng, shape=shape).final
        for _ in range(n)
    ]


def personalize_step(
    params: DenoiserParams,
    subject_image: np.ndarray,
    prior_image: np.ndarray | None,
    c: PromptTokens,
    c_pr: PromptTokens,
    sched: NoiseSchedule,
    pdict: dict,
    state: OptimizerState,
    rng: np.random.Generator,
    train_embeddings: bool = True,
) -> tuple[float, float]:
    """One update on the two-term loss; returns (subject loss, prior loss).

    (t, eps) and (t', eps') are drawn independently; gradients of the two
    noise-prediction terms are summed with unit weights. Passing
    ``prior_image=None`` drops the prior term (ablation mode).
    """
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(subject_image.shape)
    z_t = diffusion.forward_noise(subject_image, t, eps, sched)
    loss_s, grad = model.backprop_mse(
        params, None, z_t, t, c, eps, "full", train_embeddings
    )
    loss_p = 0.0
    if prior_image is not None:
        t2 = int(rng.integers(1, sched.T + 1))
        eps2 = rng.standard_normal(prior_image.shape)
        z_t2 = diffusion.forward_noise(prior_image, t2, eps2, sched)
        loss_p, grad_p = model.backprop_mse(
            params, None, z_t2, t2, c_pr, eps2, "full", train_embeddings
        )
        grad = {k: grad[k] + grad_p[k] for k in grad}
    optim.adamw_step(pdict, grad, state)
    return loss_s, loss_p


def run_personalization(
    params: DenoiserParams,
    cfg: PersonalizationConfig,
    prior_images: list[np.ndarray] | None,
    sched: NoiseSchedule,
) -> list[tuple[int, float, float]]:
    """Full personalization loop (in place); returns (step, loss_s, loss_p) rows.

    Reference and prior images are cycled round-robin. The whole run is a
    pure function of (params, cfg, prior set).
    """
    if cfg.use_prior and not prior_images:
        raise ValueError("use_prior requires a prior image set")
    c, c_pr = build_personalization_prompt(cfg.class_noun, cfg.description)
    rng = np.random.default_rng(cfg.seed)
    pdict = optim.trainable_dict(params, None, "full", cfg.train_embeddings)
    state = optim.init_optimizer(pdict, lr=cfg.lr)
    rows = []
    for step in range(cfg.steps):
        subject = cfg.reference_images[step % len(cfg.reference_images)]
        prior = prior_images[step % len(prior_images)] if cfg.use_prior else None
        loss_s, loss_p = personalize_step(
            params, subject, prior, c, c_pr, sched, pdict, state, rng, cfg.train_embeddings
        )
        rows.append((step, loss_s, loss_p))
    return rows
