"""AdamW with decoupled weight decay over named parameter dictionaries.

The trainable set is exposed as a flat {name: array} mapping (built by
``trainable_dict``); decay applies to weight matrices only, never to
biases or embedding tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DenoiserParams, LoraAdapter


def trainable_dict(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    mode: str,
    train_embeddings: bool = True,
) -> dict[str, np.ndarray]:
    """Name -> array view of the trainable parameters.

    mode "full": embeddings (optional) plus every layer's W and b.
    mode "lora": only the A/B factors of enabled adapters.
    """
    out: dict[str, np.ndarray] = {}
    if mode == "full":
        if train_embeddings:
            out["tok_emb"] = params.tok_emb
        out["t_emb"] = params.t_emb
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
    elif mode == "lora":
        for ad in adapters or []:
            if ad.enabled:
                out[f"A{ad.layer}"] = ad.A
                out[f"B{ad.layer}"] = ad.B
    else:
        raise ValueError(f"unknown trainable mode {mode!r}")
    return out


def _decays(name: str) -> bool:
    # weight matrices only: W of the network, A/B of adapters
    return name[0] in "WAB" and name not in ("tok_emb", "t_emb")


@dataclass
class OptimizerState:
    """First/second moment accumulators plus hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(
    pdict: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> OptimizerState:
    state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay, eps=eps)
    for name, p in pdict.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(
    pdict: dict[str, np.ndarray],
    grad: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update, in place on pdict arrays."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in pdict.items():
        g = np.asarray(grad.get(name, 0.0))
        if g.shape != p.shape:
            if g.shape == ():
                g = np.zeros_like(p)
            else:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay != 0.0 and _decays(name):
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return pdict, state
