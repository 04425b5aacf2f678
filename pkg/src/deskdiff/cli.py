"""Command-line pipeline orchestration.

Five subcommands (pretrain, personalize, rl-finetune, sample, eval) each
read a configuration file, run one stage, and write their artifacts to a
run directory named by the effective config hash and seed. Run
directories are append-only: an existing directory is refused unless
--force is given. Every artifact embeds the config hash, and the world
manifest is written alongside so provenance can be audited.

Exit codes: 0 success, 2 configuration error, 3 checkpoint error,
4 numeric failure (a non-finite quantity was detected).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import figures, pipeline, world
from .checkpoint import CheckpointError, load_checkpoint, require_stage, save_checkpoint
from .config import ConfigError, RunConfig, default_config, parse_config
from .rl import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERIC = 4

PRETRAIN_COLUMNS = ("step", "loss")
PERSONALIZE_COLUMNS = ("step", "subject_loss", "prior_loss")
RL_COLUMNS = ("epoch", "mean_reward_id", "mean_reward_all", "clip_fraction", "mean_ratio")
SAMPLE_COLUMNS = ("index", "reward")


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    run = Path(args.out) / f"{command}-{cfg.hash()}-s{cfg.seed}"
    if run.exists() and not args.force:
        raise ConfigError(
            f"run directory {run} already exists; pass --force to overwrite"
        )
    run.mkdir(parents=True, exist_ok=True)
    # record the effective configuration (all defaults materialized) and
    # the world manifest the run was produced against
    (run / "config.cfg").write_text(cfg.serialize())
    world.write_manifest(run / "world_manifest.json")
    print(f"run directory: {run}")
    print(f"config hash {cfg.hash()}, seed {cfg.seed}; effective settings:")
    sys.stdout.write(cfg.serialize())
    return run


def _write_csv(path: Path, columns, rows, cfg: RunConfig) -> None:
    path.write_text(pipeline.format_csv(columns, rows, cfg.hash(), cfg.seed))
    print(f"wrote {path}")


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    run = _run_dir(args, cfg, "pretrain")
    ckpt, losses = pipeline.stage_pretrain(cfg)
    save_checkpoint(run / "base.ckpt", ckpt)
    rows = [(i, loss) for i, loss in enumerate(losses)]
    _write_csv(run / "pretrain_loss.csv", PRETRAIN_COLUMNS, rows, cfg)
    figures.save_loss_curve(rows, run / "pretrain_loss.png")
    print(f"final loss {losses[-1]:.4f}; wrote {run / 'base.ckpt'}")
    return EXIT_OK


def cmd_personalize(args) -> int:
    cfg = _load_config(args)
    base = load_checkpoint(args.checkpoint)
    require_stage(base, "base")
    run = _run_dir(args, cfg, "personalize")
    ckpt, rows, prior_images = pipeline.stage_personalize(cfg, base)
    save_checkpoint(run / "personalized.ckpt", ckpt)
    _write_csv(run / "personalize_log.csv", PERSONALIZE_COLUMNS, rows, cfg)
    figures.save_loss_curve(rows, run / "personalize_log.png")
    if prior_images:
        figures.save_image_grid(prior_images[:10], run / "prior_grid.png")
    print(f"wrote {run / 'personalized.ckpt'}")
    return EXIT_OK


def cmd_rl_finetune(args) -> int:
    cfg = _load_config(args)
    personalized = load_checkpoint(args.checkpoint)
    require_stage(personalized, "personalized")
    run = _run_dir(args, cfg, "rl-finetune")
    ckpt, merged, rows = pipeline.stage_rl(cfg, personalized)
    save_checkpoint(run / "rl.ckpt", ckpt)
    save_checkpoint(run / "rl_merged.ckpt", merged)
    _write_csv(run / "learning_curve.csv", RL_COLUMNS, rows, cfg)
    figures.save_learning_curve(rows, run / "learning_curve.png")
    print(f"final mean reward {rows[-1][2]:.3f}; wrote {run / 'rl.ckpt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    run = _run_dir(args, cfg, "sample")
    images, rewards = pipeline.stage_sample(cfg, ckpt, args.prompt, args.n)
    (run / "samples.txt").write_text(pipeline.format_image_dump(images, cfg.hash()))
    rows = [(i, r) for i, r in enumerate(rewards)]
    _write_csv(run / "samples.csv", SAMPLE_COLUMNS, rows, cfg)
    figures.save_image_grid(images, run / "samples.png", rewards=rewards)
    print(f"mean reward {sum(rewards) / len(rewards):.3f} over {len(rewards)} samples")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    checkpoints = {}
    for spec in args.checkpoint:
        if "=" not in spec:
            raise ConfigError(f"--checkpoint expects LABEL=PATH, got {spec!r}")
        label, path = spec.split("=", 1)
        ckpt = load_checkpoint(path)
        require_stage(ckpt, "base", "personalized", "rl")
        checkpoints[label] = ckpt
    run = _run_dir(args, cfg, "eval")
    pg = pipeline.rl_config(cfg)
    rows = pipeline.stage_eval(cfg, checkpoints, [pg.prompt_id, pg.prompt_plain])
    _write_csv(run / "metrics.csv", pipeline.evaluate.ABLATION_COLUMNS, rows, cfg)
    figures.save_report_chart(rows, run / "metrics.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskdiff",
        description="Personalized diffusion pipeline: pretrain, personalize, "
        "RL fine-tune, sample and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="configuration file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="runs", help="parent directory for run outputs")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="input checkpoint path")

    p = sub.add_parser("pretrain", help="train the base model on the synthetic world")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("personalize", help="bind the identifier token to the subject")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("rl-finetune", help="policy-gradient fine-tuning of the adapters")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_rl_finetune)

    p = sub.add_parser("sample", help="render images for a prompt from a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--prompt", required=True, help='prompt text, e.g. "a [*] plushie with pens"')
    p.add_argument("--n", type=int, default=10, help="number of images")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="metric report over labeled checkpoints")
    common(p)
    p.add_argument(
        "--checkpoint",
        action="append",
        required=True,
        metavar="LABEL=PATH",
        help="checkpoint to evaluate; repeatable",
    )
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
