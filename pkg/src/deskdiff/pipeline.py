"""Stage orchestration shared by the CLI and the test suite.

Each stage is a pure function of (config, input checkpoint): the global
seed drives a dedicated generator per stage, so identical inputs give
bit-identical outputs regardless of how stages are invoked.
"""

from __future__ import annotations

import numpy as np

from . import diffusion, evaluate, model, personalize, rl, world
from .checkpoint import Checkpoint, CheckpointError, require_stage
from .config import RunConfig
from .diffusion import SamplerConfig
from .model import Architecture
from .vocab import PromptTokens, tokenize


def build_arch(cfg: RunConfig) -> Architecture:
    return Architecture(
        height=world.HEIGHT,
        width=world.WIDTH,
        channels=world.CHANNELS,
        embed_dim=cfg["model.embed_dim"],
        time_dim=cfg["model.time_dim"],
        hidden=cfg.hidden_sizes(),
        timesteps=cfg["model.timesteps"],
    )


def build_schedule(cfg: RunConfig) -> diffusion.NoiseSchedule:
    return diffusion.build_schedule(
        cfg["model.timesteps"], cfg["model.beta_start"], cfg["model.beta_end"]
    )


def schedule_meta(cfg: RunConfig) -> dict:
    return {
        "T": cfg["model.timesteps"],
        "beta_start": cfg["model.beta_start"],
        "beta_end": cfg["model.beta_end"],
    }


def check_schedule(cfg: RunConfig, ckpt: Checkpoint) -> None:
    if ckpt.schedule != schedule_meta(cfg):
        raise CheckpointError(
            f"config schedule {schedule_meta(cfg)} differs from checkpoint schedule {ckpt.schedule}"
        )


def stage_pretrain(cfg: RunConfig) -> tuple[Checkpoint, list[float]]:
    """Stage 0: train the base model on the synthetic world."""
    rng = np.random.default_rng(cfg.seed)
    params = model.init_params(build_arch(cfg), rng)
    sched = build_schedule(cfg)
    losses = personalize.pretrain_base(
        params,
        sched,
        steps=cfg["pretrain.steps"],
        batch_size=cfg["pretrain.batch_size"],
        lr=cfg["pretrain.lr"],
        null_prob=cfg["pretrain.null_prob"],
        rng=rng,
        lr_final=cfg["pretrain.lr_final"],
        snr_weighting=cfg["pretrain.snr_weighting"],
        aug_prob=cfg["pretrain.aug_prob"],
    )
    ckpt = Checkpoint(
        params=params, stage="base", schedule=schedule_meta(cfg), config_hash=cfg.hash()
    )
    return ckpt, losses


def stage_personalize(cfg: RunConfig, base: Checkpoint):
    """Stage 1: bind the identifier token to the rare subject.

    Returns (checkpoint, training-log rows, prior images).
    """
    require_stage(base, "base")
    check_schedule(cfg, base)
    sched = build_schedule(cfg)
    params = base.params.copy()
    description = cfg["personalize.description"] or None
    pcfg = personalize.PersonalizationConfig(
        class_noun=cfg["personalize.class_noun"],
        description=description,
        reference_images=world.reference_images(cfg["personalize.num_reference"]),
        prior_size=cfg["personalize.prior_size"],
        lr=cfg["personalize.lr"],
        steps=cfg["personalize.steps"],
        train_embeddings=cfg["personalize.train_embeddings"],
        use_prior=cfg["personalize.use_prior"],
        seed=cfg.seed,
    )
    _, c_pr = personalize.build_personalization_prompt(pcfg.class_noun, pcfg.description)
    prior_images = []
    if pcfg.use_prior:
        prior_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        prior_images = personalize.generate_prior_set(
            params,
            c_pr,
            pcfg.prior_size,
            SamplerConfig(cfg["personalize.sampler_steps"], cfg["personalize.guidance_scale"]),
            sched,
            prior_rng,
        )
    rows = personalize.run_personalization(params, pcfg, prior_images or None, sched)
    ckpt = Checkpoint(
        params=params, stage="personalized", schedule=schedule_meta(cfg), config_hash=cfg.hash()
    )
    return ckpt, rows, prior_images


def rl_config(cfg: RunConfig, identifier_only: bool = False) -> rl.PGConfig:
    prompt_id, prompt_plain = rl.build_rl_prompts(
        cfg["personalize.class_noun"], cfg["rl.activity"]
    )
    return rl.PGConfig(
        prompt_id=prompt_id,
        prompt_plain=prompt_plain,
        rollouts=cfg["rl.rollouts"],
        minibatch=cfg["rl.minibatch"],
        grad_steps=cfg["rl.grad_steps"],
        clip_range=cfg["rl.clip_range"],
        lr=cfg["rl.lr"],
        lr_final=cfg["rl.lr_final"],
        epochs=cfg["rl.epochs"],
        sampler=SamplerConfig(cfg["rl.sampler_steps"], cfg["rl.guidance_scale"]),
        mix_prob=1.0 if identifier_only else cfg["rl.mix_prob"],
        kl_coef=cfg["rl.kl_coef"],
        strip_identifier=cfg["world.strip_identifier"],
        seed=cfg.seed,
    )


def stage_rl(cfg: RunConfig, personalized: Checkpoint):
    """Stage 2: LoRA-only policy-gradient fine-tuning.

    Returns (checkpoint with adapters, merged checkpoint, curve rows).
    """
    require_stage(personalized, "personalized")
    check_schedule(cfg, personalized)
    sched = build_schedule(cfg)
    params = personalized.params.copy()
    pg = rl_config(cfg)
    adapters, rows = rl.run_rl(
        params, pg, sched, lora_rank=cfg["rl.lora_rank"], lora_alpha=cfg["rl.lora_alpha"]
    )
    ckpt = Checkpoint(
        params=params,
        stage="rl",
        schedule=schedule_meta(cfg),
        adapters=adapters,
        config_hash=cfg.hash(),
    )
    merged = Checkpoint(
        params=model.merge_lora(params, adapters),
        stage="rl",
        schedule=schedule_meta(cfg),
        config_hash=cfg.hash(),
    )
    return ckpt, merged, rows


def stage_sample(cfg: RunConfig, ckpt: Checkpoint, prompt_text: str, n: int):
    """Render n images for a prompt; returns (images, rewards)."""
    check_schedule(cfg, ckpt)
    sched = build_schedule(cfg)
    prompt = tokenize(prompt_text)
    images = evaluate.sample_images(
        ckpt.params,
        ckpt.adapters,
        prompt,
        n,
        SamplerConfig(cfg["eval.sampler_steps"], cfg["eval.guidance_scale"]),
        sched,
        cfg.seed,
    )
    rewards = [world.reward(im, prompt, cfg["world.strip_identifier"]) for im in images]
    return images, rewards


def stage_eval(cfg: RunConfig, checkpoints: dict, prompts: list[PromptTokens], seeds=None):
    """Metric report rows over labeled checkpoints."""
    sched = build_schedule(cfg)
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    labeled = {}
    for label, ckpt in checkpoints.items():
        check_schedule(cfg, ckpt)
        labeled[label] = (ckpt.params, ckpt.adapters)
    return evaluate.ablation_report(
        labeled,
        prompts,
        n=cfg["eval.samples"],
        seeds=seeds,
        sampler=SamplerConfig(cfg["eval.sampler_steps"], cfg["eval.guidance_scale"]),
        sched=sched,
        references=world.reference_images(cfg["personalize.num_reference"]),
        strip_identifier=cfg["world.strip_identifier"],
    )


def format_csv(columns, rows, config_hash: str, seed: int) -> str:
    """Deterministic CSV text with a provenance header comment."""
    out = [f"# config_hash={config_hash} seed={seed}", ",".join(columns)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def format_image_dump(images, config_hash: str) -> str:
    """Plain-text tensor dump: header then one image per block, row-major."""
    h, w, c = np.shape(images[0])
    lines = [f"# config_hash={config_hash}", f"{len(images)} {h} {w} {c}"]
    for img in images:
        flat = np.asarray(img).reshape(-1)
        lines.append(" ".join(repr(float(v)) for v in flat))
    return "\n".join(lines) + "\n"


def parse_image_dump(text: str):
    """Inverse of format_image_dump."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    n, h, w, c = (int(x) for x in lines[0].split())
    images = []
    for ln in lines[1:1 + n]:
        images.append(np.array([float(x) for x in ln.split()]).reshape(h, w, c))
    return images
