"""Quantitative metrics, ablation reports and rater-vote aggregation."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from . import diffusion, model, world
from .diffusion import NoiseSchedule, SamplerConfig
from .vocab import PromptTokens


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero vectors map to 0 by convention."""
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def text_fidelity(images, prompt: PromptTokens) -> float:
    """Mean cosine between image attribute scores and the prompt indicator."""
    if not len(images):
        raise ValueError("need at least one image")
    tvec = world.text_embed(prompt)
    return float(np.mean([cosine(world.image_embed(img), tvec) for img in images]))


def subject_fidelity(images, references) -> float:
    """Mean pairwise cosine of glyph features against the reference set."""
    if not len(images) or not len(references):
        raise ValueError("need at least one image on each side")
    gen = [world.subject_features(img) for img in images]
    ref = [world.subject_features(img) for img in references]
    return float(np.mean([[cosine(g, r) for r in ref] for g in gen]))


PAIR_CHOICES = {"A", "B", "PASS"}
BINARY_CHOICES = {"GOOD", "BAD", "PASS"}


@dataclass
class VoteResult:
    winners: dict
    rate: float        # percent of items won by A / GOOD
    mode: str          # "pairwise" or "binary"
    raters: int


def majority_vote(rows, pass_as_bad: bool = True) -> VoteResult:
    """Aggregate (item, rater, choice) rows by strict per-item majority.

    With ``pass_as_bad`` (the conservative rule), PASS counts as BAD in
    binary tables and against the candidate under test (i.e. as B) in
    pairwise tables. Ties with an even rater count resolve to the
    conservative side. The rater set must be identical across items, one
    row per (item, rater).
    """
    by_item: dict = defaultdict(dict)
    choices = set()
    for item, rater, choice in rows:
        choice = str(choice).upper()
        if rater in by_item[item]:
            raise ValueError(f"duplicate vote for item {item!r} by rater {rater!r}")
        by_item[item][rater] = choice
        choices.add(choice)
    if not by_item:
        raise ValueError("empty vote table")
    if choices <= BINARY_CHOICES:
        mode, pos, neg = "binary", "GOOD", "BAD"
    elif choices <= PAIR_CHOICES:
        mode, pos, neg = "pairwise", "A", "B"
    else:
        raise ValueError(f"mixed or unknown choices: {sorted(choices)}")

    rater_sets = {frozenset(v) for v in by_item.values()}
    if len(rater_sets) != 1:
        raise ValueError("every item must be voted on by the same raters")
    n_raters = len(next(iter(rater_sets)))

    winners = {}
    for item, votes in by_item.items():
        counts = Counter(votes.values())
        n_pos = counts[pos]
        n_neg = counts[neg]
        if pass_as_bad:
            n_neg += counts["PASS"]
        # strict majority for the positive option; ties are conservative
        winners[item] = pos if n_pos > n_neg else neg
    rate = 100.0 * sum(1 for w in winners.values() if w == pos) / len(winners)
    return VoteResult(winners=winners, rate=rate, mode=mode, raters=n_raters)


def sample_images(
    params,
    adapters,
    prompt: PromptTokens,
    n: int,
    sampler: SamplerConfig,
    sched: NoiseSchedule,
    seed: int,
):
    """n images from a checkpoint under one prompt (no trajectory kept)."""
    eps_fn = model.make_eps_fn(params, adapters)
    cfg = SamplerConfig(sampler.steps, sampler.guidance_scale, record_trajectory=False)
    rng = np.random.default_rng(seed)
    shape = params.arch.image_shape
    return [
        diffusion.ancestral_sample(eps_fn, prompt, cfg, sched, rng, shape=shape).final
        for _ in range(n)
    ]


ABLATION_COLUMNS = (
    "label",
    "prompt",
    "seed",
    "n",
    "text_fidelity",
    "subject_fidelity",
    "mean_reward",
)


def ablation_report(
    checkpoints: dict,
    prompts: list[PromptTokens],
    n: int,
    seeds: list[int],
    sampler: SamplerConfig,
    sched: NoiseSchedule,
    references,
    strip_identifier: bool = True,
) -> list[tuple]:
    """Metric rows for every (checkpoint label, prompt, seed) cell.

    ``checkpoints`` maps label -> (params, adapters). Subject fidelity is
    measured against the supplied reference images; the oracle reward
    mean stands in for learned alignment scorers.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = []
    for label in sorted(checkpoints):
        params, adapters = checkpoints[label]
        for prompt in prompts:
            for seed in seeds:
                images = sample_images(params, adapters, prompt, n, sampler, sched, seed)
                rows.append(
                    (
                        label,
                        " ".join(prompt.words()),
                        seed,
                        n,
                        text_fidelity(images, prompt),
                        subject_fidelity(images, references),
                        float(np.mean([world.reward(im, prompt, strip_identifier) for im in images])),
                    )
                )
    return rows
