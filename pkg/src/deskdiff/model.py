"""Conditional noise-prediction network with analytic backpropagation.

A small fully connected network stands in for the usual U-Net: the
flattened noisy image is concatenated with a mean-pooled prompt embedding
and a learned per-timestep embedding, passed through tanh hidden layers,
and mapped linearly back to image shape. Gradients (for both the full
parameter set and LoRA-only training) are computed by an explicit chain
rule so they can be validated against finite differences.

All arrays are float64. Forward/backward are pure given their inputs;
training mutates parameter arrays only through the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion
from .diffusion import NoiseSchedule, posterior_mean, transition_logprob
from .vocab import NULL_PROMPT, NULL_TOKEN, VOCAB_SIZE, PromptTokens


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor for the denoiser."""

    height: int = 16
    width: int = 16
    channels: int = 3
    embed_dim: int = 12
    time_dim: int = 8
    hidden: tuple[int, ...] = (512, 512)
    timesteps: int = 50

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def image_dim(self) -> int:
        return self.height * self.width * self.channels

    @property
    def input_dim(self) -> int:
        return self.image_dim + self.embed_dim + self.time_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) dimensions of each fully connected layer."""
        sizes = [self.input_dim, *self.hidden, self.image_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


@dataclass
class DenoiserParams:
    """Flat parameter store: embeddings plus per-layer (W, b)."""

    arch: Architecture
    tok_emb: np.ndarray
    t_emb: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            arch=self.arch,
            tok_emb=self.tok_emb.copy(),
            t_emb=self.t_emb.copy(),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class LoraAdapter:
    """Low-rank additive delta (alpha/r) B @ A for one weight matrix."""

    layer: int
    A: np.ndarray  # (r, n)
    B: np.ndarray  # (m, r)
    rank: int
    alpha: float
    enabled: bool = False

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.layer, self.A.copy(), self.B.copy(), self.rank, self.alpha, self.enabled)


def init_params(arch: Architecture, rng: np.random.Generator) -> DenoiserParams:
    """Seeded initialization: unit Gaussian embeddings, scaled-Gaussian weights.

    Embedding rows are unit scale so the conditioning signal is comparable
    to the per-entry image signal at the input layer.
    """
    tok_emb = rng.standard_normal((VOCAB_SIZE, arch.embed_dim))
    t_emb = rng.standard_normal((arch.timesteps, arch.time_dim))
    weights, biases = [], []
    for m, n in arch.layer_dims():
        weights.append(rng.standard_normal((m, n)) / np.sqrt(n))
        biases.append(np.zeros(m))
    return DenoiserParams(arch, tok_emb, t_emb, weights, biases)


def embed_prompt(params: DenoiserParams, tokens: PromptTokens) -> np.ndarray:
    """Mean of the token embedding rows; the null prompt embeds to zero."""
    if tokens.is_null:
        return np.zeros(params.arch.embed_dim)
    rows = params.tok_emb[list(tokens.tokens)]
    return rows.mean(axis=0)


def attach_lora(
    params: DenoiserParams,
    layers: list[int],
    rank: int,
    alpha: float,
    rng: np.random.Generator,
) -> list[LoraAdapter]:
    """Create adapters for the selected layers (A ~ N(0, 1/r), B = 0)."""
    n_layers = len(params.weights)
    adapters = []
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} does not exist (network has {n_layers})")
        m, n = params.weights[layer].shape
        A = rng.standard_normal((rank, n)) / np.sqrt(rank)
        B = np.zeros((m, rank))
        adapters.append(LoraAdapter(layer, A, B, rank, alpha))
    return adapters


def merge_lora(params: DenoiserParams, adapters: list[LoraAdapter]) -> DenoiserParams:
    """Fold adapter deltas into the base weights."""
    merged = params.copy()
    for ad in adapters:
        if ad.A.shape[1] != merged.weights[ad.layer].shape[1] or ad.B.shape[0] != merged.weights[ad.layer].shape[0]:
            raise diffusion.ShapeError("adapter shape does not match its layer")
        merged.weights[ad.layer] = merged.weights[ad.layer] + ad.delta()
    return merged


def _effective_weights(params: DenoiserParams, adapters: list[LoraAdapter] | None):
    if not adapters:
        return list(params.weights)
    weights = list(params.weights)
    for ad in adapters:
        if ad.enabled:
            weights[ad.layer] = weights[ad.layer] + ad.delta()
    return weights


def _forward(params, adapters, Z, t_idx, C):
    """Batched forward pass.

    Z: (B, D) flattened images, t_idx: (B,) 1-based timesteps,
    C: (B, d_e) conditioning vectors. Returns (out, cache).
    """
    arch = params.arch
    weights = _effective_weights(params, adapters)
    temb = params.t_emb[t_idx - 1]
    x = np.concatenate([Z, C, temb], axis=1)
    activations = [x]
    h = x
    n_layers = len(weights)
    for i in range(n_layers - 1):
        h = np.tanh(h @ weights[i].T + params.biases[i])
        activations.append(h)
    out = h @ weights[-1].T + params.biases[-1]
    cache = {"activations": activations, "weights": weights, "t_idx": t_idx}
    return out, cache


def _backward(params, adapters, cache, d_out, trainable, train_embeddings, prompts=None):
    """Batched backward pass for d(objective)/d(out) = d_out.

    trainable: "full" or "lora". For "full", prompt token lists are needed
    to scatter conditioning gradients into the embedding table.
    """
    arch = params.arch
    weights = cache["weights"]
    acts = cache["activations"]
    n_layers = len(weights)
    grad: dict[str, np.ndarray] = {}
    lora_by_layer = {}
    if trainable == "lora":
        if not adapters:
            raise ValueError("lora training requires adapters")
        lora_by_layer = {ad.layer: ad for ad in adapters if ad.enabled}

    d_h = d_out
    for i in reversed(range(n_layers)):
        x_in = acts[i]
        if i == n_layers - 1:
            # output layer is linear
            d_a = d_h
        else:
            h_out = acts[i + 1]
            d_a = d_h * (1.0 - h_out * h_out)
        dW = d_a.T @ x_in
        if trainable == "full":
            grad[f"W{i}"] = dW
            grad[f"b{i}"] = d_a.sum(axis=0)
        elif i in lora_by_layer:
            ad = lora_by_layer[i]
            grad[f"A{ad.layer}"] = ad.scaling * (ad.B.T @ dW)
            grad[f"B{ad.layer}"] = ad.scaling * (dW @ ad.A.T)
        d_h = d_a @ weights[i]

    if trainable == "full":
        d_x = d_h
        D = arch.image_dim
        d_cond = d_x[:, D:D + arch.embed_dim]
        d_temb = d_x[:, D + arch.embed_dim:]
        g_tok = np.zeros_like(params.tok_emb)
        g_t = np.zeros_like(params.t_emb)
        t_idx = cache["t_idx"]
        for b in range(d_x.shape[0]):
            g_t[t_idx[b] - 1] += d_temb[b]
            if train_embeddings and prompts is not None:
                toks = prompts[b].tokens
                if toks != (NULL_TOKEN,):
                    for tok in toks:
                        g_tok[tok] += d_cond[b] / len(toks)
        grad["t_emb"] = g_t
        grad["tok_emb"] = g_tok
        if not train_embeddings:
            grad["tok_emb"] = np.zeros_like(params.tok_emb)
    return grad


def predict_eps(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    z: np.ndarray,
    t: int,
    cond: np.ndarray,
) -> np.ndarray:
    """Single-example noise prediction from a conditioning vector."""
    arch = params.arch
    if np.shape(z) != arch.image_shape:
        raise diffusion.ShapeError(f"image shape {np.shape(z)} != {arch.image_shape}")
    if np.shape(cond) != (arch.embed_dim,):
        raise diffusion.ShapeError("conditioning vector has wrong length")
    out, _ = _forward(
        params, adapters, z.reshape(1, -1), np.array([t]), cond.reshape(1, -1)
    )
    return out.reshape(arch.image_shape)


def make_eps_fn(params: DenoiserParams, adapters: list[LoraAdapter] | None = None):
    """Closure (z, t, prompt) -> predicted noise, embedding the prompt."""

    def eps_fn(z, t, prompt: PromptTokens):
        return predict_eps(params, adapters, z, t, embed_prompt(params, prompt))

    return eps_fn


def backprop_mse(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    z: np.ndarray,
    t: int,
    prompt: PromptTokens,
    target: np.ndarray,
    trainable: str = "full",
    train_embeddings: bool = True,
):
    """Loss and exact gradient of the entrywise-mean squared error."""
    loss, grad = batch_backprop_mse(
        params, adapters, [z], [t], [prompt], [target], trainable, train_embeddings
    )
    return loss, grad


def batch_backprop_mse(
    params, adapters, zs, ts, prompts, targets, trainable="full", train_embeddings=True,
    weights=None,
):
    """Minibatch MSE loss/gradient, averaged over examples and entries.

    ``weights``, when given, is a per-example factor applied to each
    example's squared error (mean-1 weights keep the loss scale).
    """
    arch = params.arch
    B = len(zs)
    Z = np.stack([np.asarray(z).reshape(-1) for z in zs])
    if Z.shape[1] != arch.image_dim:
        raise diffusion.ShapeError("flattened image has wrong length")
    T_targets = np.stack([np.asarray(t).reshape(-1) for t in targets])
    if T_targets.shape != Z.shape:
        raise diffusion.ShapeError("target shape differs from input shape")
    t_idx = np.asarray(ts, dtype=np.int64)
    C = np.stack([embed_prompt(params, p) for p in prompts])
    out, cache = _forward(params, adapters, Z, t_idx, C)
    diff = out - T_targets
    if weights is None:
        loss = float(np.mean(diff * diff))
        d_out = 2.0 * diff / diff.size
    else:
        w = np.asarray(weights, dtype=np.float64)[:, None]
        loss = float(np.mean(w * diff * diff))
        d_out = 2.0 * w * diff / diff.size
    grad = _backward(params, adapters, cache, d_out, trainable, train_embeddings, prompts)
    return loss, grad


def backprop_logprob(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    z_t: np.ndarray,
    z_prev: np.ndarray,
    pos: int,
    sched: NoiseSchedule,
    prompt: PromptTokens,
    guidance_scale: float,
    trainable: str = "lora",
    train_embeddings: bool = False,
):
    """Log-density of a stored transition and its gradient.

    The transition mean is the posterior mean computed from the guided
    noise prediction eps_u + s (eps_c - eps_u); gradients chain through
    both the conditional and unconditional network passes. ``pos`` indexes
    the (possibly strided) schedule; the denoiser receives the original
    timestep recorded in ``sched.timesteps``.
    """
    sig = sched.sigma[pos - 1]
    if sig <= 0.0:
        raise diffusion.DegenerateStepError("deterministic step has no log-density")
    arch = params.arch
    t_orig = int(sched.timesteps[pos - 1])
    Z = np.asarray(z_t).reshape(1, -1)
    t_arr = np.array([t_orig])
    c_cond = embed_prompt(params, prompt).reshape(1, -1)
    c_null = np.zeros((1, arch.embed_dim))
    out_c, cache_c = _forward(params, adapters, Z, t_arr, c_cond)
    out_u, cache_u = _forward(params, adapters, Z, t_arr, c_null)
    s = guidance_scale
    eps_hat = (out_u + s * (out_c - out_u)).reshape(arch.image_shape)
    mean = posterior_mean(np.asarray(z_t), pos, eps_hat, sched)
    logp = transition_logprob(np.asarray(z_prev), mean, float(sig))

    d_mean = (np.asarray(z_prev) - mean) / (sig * sig)
    b = sched.beta[pos - 1]
    a = sched.alpha[pos - 1]
    ab = sched.alpha_bar[pos - 1]
    k = -b / (np.sqrt(a) * np.sqrt(1.0 - ab))
    d_eps_hat = (k * d_mean).reshape(1, -1)

    grad_c = _backward(
        params, adapters, cache_c, s * d_eps_hat, trainable, train_embeddings, [prompt]
    )
    grad_u = _backward(
        params, adapters, cache_u, (1.0 - s) * d_eps_hat, trainable, train_embeddings, [NULL_PROMPT]
    )
    grad = {key: grad_c.get(key, 0.0) + grad_u.get(key, 0.0) for key in set(grad_c) | set(grad_u)}
    return logp, grad


def batch_eps(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    Z: np.ndarray,
    t_idx: np.ndarray,
    C: np.ndarray,
) -> np.ndarray:
    """Noise predictions for a batch of flattened images.

    Z: (n, D) flattened images, t_idx: (n,) 1-based original timesteps,
    C: (n, d_e) conditioning vectors. Returns (n, D) predictions.
    """
    out, _ = _forward(params, adapters, Z, np.asarray(t_idx, dtype=np.int64), C)
    return out


def batch_transition_stats(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    Z_t: np.ndarray,
    Z_prev: np.ndarray,
    positions: np.ndarray,
    sched: NoiseSchedule,
    conds: np.ndarray,
    scales: np.ndarray,
):
    """Guided log-densities for a batch of stored transitions.

    Each row pairs a state Z_t[j] at schedule position positions[j] with
    its sampled successor Z_prev[j]; conds[j] is the prompt embedding and
    scales[j] the guidance scale. Returns (logps, aux) where aux carries
    the caches needed by :func:`batch_transition_grad`. All positions must
    be stochastic (sigma > 0).
    """
    pos = np.asarray(positions, dtype=np.int64)
    sig = sched.sigma[pos - 1]
    if np.any(sig <= 0.0):
        raise diffusion.DegenerateStepError("deterministic step has no log-density")
    b = sched.beta[pos - 1]
    a = sched.alpha[pos - 1]
    ab = sched.alpha_bar[pos - 1]
    t_orig = sched.timesteps[pos - 1]
    s = np.asarray(scales, dtype=np.float64)
    out_c, cache_c = _forward(params, adapters, Z_t, t_orig, conds)
    out_u, cache_u = _forward(params, adapters, Z_t, t_orig, np.zeros_like(conds))
    eps_hat = out_u + s[:, None] * (out_c - out_u)
    mean = (Z_t - (b / np.sqrt(1.0 - ab))[:, None] * eps_hat) / np.sqrt(a)[:, None]
    resid = Z_prev - mean
    d = Z_t.shape[1]
    logps = (
        -0.5 * d * (diffusion.LOG_2PI + 2.0 * np.log(sig))
        - np.sum(resid * resid, axis=1) / (2.0 * sig * sig)
    )
    k = -b / (np.sqrt(a) * np.sqrt(1.0 - ab))
    d_eps = (k / (sig * sig))[:, None] * resid
    aux = {"cache_c": cache_c, "cache_u": cache_u, "d_eps": d_eps, "scales": s}
    return logps, aux


def batch_transition_grad(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    aux: dict,
    coefs: np.ndarray,
) -> dict:
    """Coefficient-weighted sum of per-transition log-density gradients.

    Returns sum_j coefs[j] * grad logp_j over the LoRA parameters, using
    the caches produced by :func:`batch_transition_stats`.
    """
    c = np.asarray(coefs, dtype=np.float64)
    s = aux["scales"]
    d_eps = aux["d_eps"]
    grad_c = _backward(params, adapters, aux["cache_c"], (c * s)[:, None] * d_eps, "lora", False)
    grad_u = _backward(params, adapters, aux["cache_u"], (c * (1.0 - s))[:, None] * d_eps, "lora", False)
    return {key: grad_c.get(key, 0.0) + grad_u.get(key, 0.0) for key in set(grad_c) | set(grad_u)}


def trajectory_logprobs(
    params: DenoiserParams,
    adapters: list[LoraAdapter] | None,
    traj,
    sched: NoiseSchedule,
    steps: int,
) -> np.ndarray:
    """Recompute per-step guided log-densities of a stored trajectory."""
    view = diffusion.stride_schedule(sched, steps)
    K = view.T
    eps_fn = make_eps_fn(params, adapters)
    out = np.zeros(K)
    for i in range(K):
        k = K - i
        sig = view.sigma[k - 1]
        if sig <= 0.0:
            continue
        t_orig = int(view.timesteps[k - 1])
        eps_hat = diffusion.guided_eps(eps_fn, traj.states[i], t_orig, traj.prompt, traj.guidance_scale)
        mean = posterior_mean(traj.states[i], k, eps_hat, view)
        out[i] = transition_logprob(traj.states[i + 1], mean, float(sig))
    return out
