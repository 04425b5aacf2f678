"""Run configuration: documented text format, schema validation, hashing.

The format is line-oriented:

    # comment
    seed = 7            # bare keys are global
    [rl]
    epochs = 40         # section keys become "rl.epochs"

Every key must be in the schema; unknown keys, type mismatches and
malformed lines are reported with their line number. Defaults are
materialized for every absent key, so a parsed config always carries the
complete key set and its hash covers effective values, not just the file
contents.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


class ConfigError(Exception):
    """Invalid configuration file or value."""


# key -> (type, default). bool values are written true/false.
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    # world
    "world.strip_identifier": (bool, True),
    # model architecture + shared noise schedule
    "model.embed_dim": (int, 12),
    "model.time_dim": (int, 8),
    "model.hidden": (str, "512,512"),
    "model.timesteps": (int, 50),
    "model.beta_start": (float, 1e-4),
    "model.beta_end": (float, 0.02),
    # stage 0: base pretraining
    "pretrain.steps": (int, 3000),
    "pretrain.batch_size": (int, 16),
    "pretrain.lr": (float, 1e-3),
    "pretrain.lr_final": (float, 0.0),
    "pretrain.null_prob": (float, 0.1),
    "pretrain.snr_weighting": (bool, False),
    "pretrain.aug_prob": (float, 0.0),
    # stage 1: personalization
    "personalize.class_noun": (str, "plushie"),
    "personalize.description": (str, ""),
    "personalize.num_reference": (int, 4),
    "personalize.prior_size": (int, 32),
    "personalize.lr": (float, 2e-5),
    "personalize.steps": (int, 400),
    "personalize.train_embeddings": (bool, True),
    "personalize.use_prior": (bool, True),
    "personalize.sampler_steps": (int, 50),
    "personalize.guidance_scale": (float, 2.0),
    # stage 2: policy-gradient fine-tuning
    "rl.rollouts": (int, 16),
    "rl.minibatch": (int, 8),
    "rl.grad_steps": (int, 2),
    "rl.clip_range": (float, 1e-4),
    "rl.lr": (float, 2e-5),
    "rl.lr_final": (float, 0.0),
    "rl.epochs": (int, 30),
    "rl.guidance_scale": (float, 7.5),
    "rl.sampler_steps": (int, 50),
    "rl.mix_prob": (float, 0.5),
    "rl.activity": (str, "pens"),
    "rl.kl_coef": (float, 0.0),
    "rl.lora_rank": (int, 4),
    "rl.lora_alpha": (float, 8.0),
    # evaluation
    "eval.samples": (int, 16),
    "eval.sampler_steps": (int, 50),
    "eval.guidance_scale": (float, 2.0),
}


def _parse_value(raw: str, typ: type, key: str, lineno: int):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"line {lineno}: value {raw!r} for key {key!r} is not a valid {typ.__name__}"
        ) from None


@dataclass
class RunConfig:
    """Validated flat key-value configuration."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def with_overrides(self, **flat) -> "RunConfig":
        vals = dict(self.values)
        for k, v in flat.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return RunConfig(vals)

    def hidden_sizes(self) -> tuple[int, ...]:
        try:
            return tuple(int(x) for x in self.values["model.hidden"].split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"model.hidden {self.values['model.hidden']!r} is not a comma list of ints") from None

    def serialize(self) -> str:
        """Canonical text form (round-trips through parse_text)."""
        sections: dict[str, list[str]] = {}
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                raw = "true" if val else "false"
            else:
                raw = repr(val) if isinstance(val, float) else str(val)
            if "." in key:
                sec, sub = key.split(".", 1)
                sections.setdefault(sec, []).append(f"{sub} = {raw}")
            else:
                sections.setdefault("", []).append(f"{key} = {raw}")
        lines = list(sections.pop("", []))
        for sec in sorted(sections):
            lines.append(f"[{sec}]")
            lines.extend(sections[sec])
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]


def default_config() -> RunConfig:
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_text(text: str, origin: str = "<config>") -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    seen: dict[str, int] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if not section:
                raise ConfigError(f"{origin} line {lineno}: empty section name")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin} line {lineno}: expected 'key = value'")
        name, raw = stripped.split("=", 1)
        key = f"{section}.{name.strip()}" if section else name.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin} line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(
                f"{origin} line {lineno}: duplicate key {key!r} (first set on line {seen[key]})"
            )
        seen[key] = lineno
        typ, _ = SCHEMA[key]
        values[key] = _parse_value(raw, typ, key, lineno)
    return RunConfig(values)


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_text(text, origin=str(path))
