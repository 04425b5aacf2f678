"""Binary checkpoint format.

Layout: magic "IBCK", one version byte, a uint32 little-endian header
length, a JSON header (vocabulary, architecture, schedule, world-manifest
digest, stage marker, tensor directory), the raw tensor payload (row-major
float64, little-endian, in directory order), and a trailing SHA-256 of
everything before it. Loads are strict: checksum, version, world digest
and tensor shapes are all verified, and mismatches raise instead of
migrating silently.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import world
from .model import Architecture, DenoiserParams, LoraAdapter
from .optim import OptimizerState
from .vocab import WORDS

MAGIC = b"IBCK"
VERSION = 1

STAGES = ("base", "personalized", "rl")


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""


class CorruptionError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class DigestError(CheckpointError):
    pass


class StageError(CheckpointError):
    """A pipeline stage received a checkpoint from the wrong stage."""


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a model."""

    params: DenoiserParams
    stage: str
    schedule: dict  # {"T", "beta_start", "beta_end"}
    adapters: list[LoraAdapter] | None = None
    opt_state: OptimizerState | None = None
    world_digest: str = field(default_factory=world.manifest_digest)
    config_hash: str = ""

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            params=self.params.copy(),
            stage=self.stage,
            schedule=dict(self.schedule),
            adapters=[a.copy() for a in self.adapters] if self.adapters is not None else None,
            opt_state=None,
            world_digest=self.world_digest,
            config_hash=self.config_hash,
        )


def _tensor_directory(ckpt: Checkpoint):
    """Ordered (name, array) pairs making up the payload."""
    p = ckpt.params
    pairs = [("tok_emb", p.tok_emb), ("t_emb", p.t_emb)]
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        pairs.append((f"W{i}", w))
        pairs.append((f"b{i}", b))
    if ckpt.adapters is not None:
        for ad in ckpt.adapters:
            pairs.append((f"lora_A{ad.layer}", ad.A))
            pairs.append((f"lora_B{ad.layer}", ad.B))
    if ckpt.opt_state is not None:
        for key in sorted(ckpt.opt_state.m):
            pairs.append((f"opt_m.{key}", ckpt.opt_state.m[key]))
        for key in sorted(ckpt.opt_state.v):
            pairs.append((f"opt_v.{key}", ckpt.opt_state.v[key]))
    return pairs


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage {ckpt.stage!r}")
    arch = ckpt.params.arch
    directory = _tensor_directory(ckpt)
    header = {
        "world_digest": ckpt.world_digest,
        "vocab": list(WORDS),
        "arch": {
            "height": arch.height,
            "width": arch.width,
            "channels": arch.channels,
            "embed_dim": arch.embed_dim,
            "time_dim": arch.time_dim,
            "hidden": list(arch.hidden),
            "timesteps": arch.timesteps,
        },
        "schedule": ckpt.schedule,
        "stage": ckpt.stage,
        "config_hash": ckpt.config_hash,
        "tensors": [[name, list(a.shape)] for name, a in directory],
        "adapters": None
        if ckpt.adapters is None
        else [
            {"layer": ad.layer, "rank": ad.rank, "alpha": ad.alpha, "enabled": ad.enabled}
            for ad in ckpt.adapters
        ],
        "opt": None
        if ckpt.opt_state is None
        else {
            "lr": ckpt.opt_state.lr,
            "beta1": ckpt.opt_state.beta1,
            "beta2": ckpt.opt_state.beta2,
            "weight_decay": ckpt.opt_state.weight_decay,
            "eps": ckpt.opt_state.eps,
            "step": ckpt.opt_state.step,
            "keys": sorted(ckpt.opt_state.m),
        },
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray()
    body += MAGIC
    body += bytes([VERSION])
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for _, a in directory:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path, expect_world_digest: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 1 + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptionError("not a checkpoint file")
    if blob[len(MAGIC)] != VERSION:
        raise VersionError(f"checkpoint version {blob[len(MAGIC)]} != supported {VERSION}")
    payload, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CorruptionError("checksum mismatch")
    off = len(MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable header: {exc}") from exc
    off += hlen

    digest = expect_world_digest if expect_world_digest is not None else world.manifest_digest()
    if header["world_digest"] != digest:
        raise DigestError("checkpoint was written against a different world manifest")
    if header["vocab"] != list(WORDS):
        raise DigestError("checkpoint vocabulary differs from the current vocabulary")

    a = header["arch"]
    arch = Architecture(
        height=a["height"],
        width=a["width"],
        channels=a["channels"],
        embed_dim=a["embed_dim"],
        time_dim=a["time_dim"],
        hidden=tuple(a["hidden"]),
        timesteps=a["timesteps"],
    )
    tensors = {}
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if off + nbytes > len(payload):
            raise CorruptionError("payload truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        tensors[name] = arr
        off += nbytes
    if off != len(payload):
        raise CorruptionError("trailing bytes in payload")

    weights, biases = [], []
    for i in range(len(arch.layer_dims())):
        w = tensors[f"W{i}"]
        b = tensors[f"b{i}"]
        if w.shape != arch.layer_dims()[i] or b.shape != (arch.layer_dims()[i][0],):
            raise CheckpointError(f"layer {i} tensors do not match the architecture descriptor")
        weights.append(w)
        biases.append(b)
    params = DenoiserParams(arch, tensors["tok_emb"], tensors["t_emb"], weights, biases)
    if params.tok_emb.shape != (len(WORDS), arch.embed_dim) or params.t_emb.shape != (
        arch.timesteps,
        arch.time_dim,
    ):
        raise CheckpointError("embedding tables do not match the architecture descriptor")

    adapters = None
    if header["adapters"] is not None:
        adapters = []
        for meta in header["adapters"]:
            layer = meta["layer"]
            ad = LoraAdapter(
                layer=layer,
                A=tensors[f"lora_A{layer}"],
                B=tensors[f"lora_B{layer}"],
                rank=meta["rank"],
                alpha=meta["alpha"],
                enabled=meta["enabled"],
            )
            m, n = weights[layer].shape
            if ad.A.shape != (ad.rank, n) or ad.B.shape != (m, ad.rank):
                raise CheckpointError(f"adapter for layer {layer} has inconsistent shapes")
            adapters.append(ad)

    opt_state = None
    if header["opt"] is not None:
        o = header["opt"]
        opt_state = OptimizerState(
            lr=o["lr"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            weight_decay=o["weight_decay"],
            eps=o["eps"],
            step=o["step"],
            m={k: tensors[f"opt_m.{k}"] for k in o["keys"]},
            v={k: tensors[f"opt_v.{k}"] for k in o["keys"]},
        )

    if header["stage"] not in STAGES:
        raise CheckpointError(f"unknown stage {header['stage']!r}")
    return Checkpoint(
        params=params,
        stage=header["stage"],
        schedule=header["schedule"],
        adapters=adapters,
        opt_state=opt_state,
        world_digest=header["world_digest"],
        config_hash=header.get("config_hash", ""),
    )


def require_stage(ckpt: Checkpoint, *allowed: str) -> None:
    if ckpt.stage not in allowed:
        raise StageError(
            f"checkpoint is from stage {ckpt.stage!r}; this command requires {' or '.join(allowed)}"
        )
