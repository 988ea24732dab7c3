"""The RA-MAT network.

Forward path for pretraining::

    window -> patches -> mask -> reservoir states -> linear embed + positions
           -> mask tokens -> transformer encoder -> linear decoder (masked only)

Fine-tuning skips masking, mean-pools the encoder output over patches and
applies a linear head (softmax for classification).

All functions take batches: windows are ``[B, window_length, K]``.
"""

from __future__ import annotations

import dataclasses
import math
import re
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, NumericError, Tensor
from .reservoir import ReservoirSpec, run_patches

Params = dict[str, Tensor]


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    window_length: int = 64
    patch_length: int = 8
    num_channels: int = 3
    mask_ratio: float = 0.3
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    head: str = "regression"
    num_classes: int | None = None
    zero_masked_reservoir_input: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.patch_length < 1 or self.window_length % self.patch_length:
            raise ConfigError(f"window_length {self.window_length} is not divisible by "
                              f"patch_length {self.patch_length}")
        if self.num_patches < 2:
            raise ConfigError("a window must hold at least 2 patches")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.num_channels < 1 or self.num_layers < 0 or self.ffn_dim < 1:
            raise ConfigError("num_channels, num_layers and ffn_dim must be positive")
        if self.head not in ("regression", "classification"):
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.head == "classification" and (self.num_classes or 0) < 2:
            raise ConfigError("classification needs num_classes >= 2")

    @property
    def num_patches(self) -> int:
        return self.window_length // self.patch_length

    @property
    def patch_dim(self) -> int:
        return self.patch_length * self.num_channels

    @property
    def head_dim(self) -> int:
        return self.num_channels if self.head == "regression" else int(self.num_classes)


# ---------------------------------------------------------------------------
# parameters


def param_group(name: str) -> str:
    """Coarse group of a parameter: embed, block index, decoder or head."""
    if name.startswith("blocks."):
        return "blocks." + name.split(".")[1]
    if name.startswith(("embed.", "mask_token")):
        return "embed"
    if name.startswith("decoder."):
        return "decoder"
    if name.startswith("head."):
        return "head"
    raise KeyError(f"unknown parameter {name!r}")


def block_index(name: str) -> int | None:
    m = re.match(r"blocks\.(\d+)\.", name)
    return int(m.group(1)) if m else None


def init_params(config: ModelConfig, reservoir_size: int, rng: np.random.Generator) -> Params:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    E, F, D = config.embed_dim, config.ffn_dim, config.patch_dim
    out: Params = {}

    def weight(name, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        out[name] = Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), True, name)

    def const(name, shape, value):
        out[name] = Tensor(np.full(shape, value), True, name)

    weight("embed.weight", reservoir_size, E)
    const("embed.bias", (E,), 0.0)
    out["mask_token"] = Tensor(rng.normal(0.0, 0.02, size=E), True, "mask_token")
    for layer in range(config.num_layers):
        p = f"blocks.{layer}."
        const(p + "ln1.gamma", (E,), 1.0)
        const(p + "ln1.beta", (E,), 0.0)
        for w in ("q", "k", "v", "o"):
            weight(p + f"attn.w{w}", E, E)
            const(p + f"attn.b{w}", (E,), 0.0)
        const(p + "ln2.gamma", (E,), 1.0)
        const(p + "ln2.beta", (E,), 0.0)
        weight(p + "ffn.w1", E, F)
        const(p + "ffn.b1", (F,), 0.0)
        weight(p + "ffn.w2", F, E)
        const(p + "ffn.b2", (E,), 0.0)
    weight("decoder.weight", E, D)
    const("decoder.bias", (D,), 0.0)
    weight("head.weight", E, config.head_dim)
    const("head.bias", (config.head_dim,), 0.0)
    return out


def cast_params(params: Mapping[str, Tensor], dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), v.requires_grad, k, dtype=dtype)
            for k, v in params.items()}


# ---------------------------------------------------------------------------
# patches and masks


def patchify(windows: np.ndarray, patch_length: int) -> np.ndarray:
    """``[..., W, K] -> [..., P, patch_length*K]``, time-major within a patch."""
    windows = np.asarray(windows)
    *lead, W, K = windows.shape
    if W % patch_length:
        raise ConfigError(f"window length {W} not divisible by patch_length {patch_length}")
    return windows.reshape(*lead, W // patch_length, patch_length * K)


def unpatchify(patches: np.ndarray, num_channels: int) -> np.ndarray:
    *lead, P, D = patches.shape
    return patches.reshape(*lead, P * (D // num_channels), num_channels)


def sample_mask(P: int, mask_ratio: float, rng: np.random.Generator,
                batch: int | None = None) -> np.ndarray:
    """Bernoulli(mask_ratio) per patch, forcing at least one masked and one visible."""
    if P < 2:
        raise ContractError("need at least 2 patches to mask")
    shape = (1 if batch is None else batch, P)
    mask = rng.random(shape) < mask_ratio
    for row in np.flatnonzero(~mask.any(axis=1)):
        mask[row, rng.integers(P)] = True
    for row in np.flatnonzero(mask.all(axis=1)):
        mask[row, rng.integers(P)] = False
    return mask[0] if batch is None else mask


def sinusoidal_positions(P: int, dim: int) -> np.ndarray:
    """Fixed table: even columns ``sin(p / 10000^(2i/dim))``, odd columns cosine."""
    pos = np.arange(P, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    table = np.zeros((P, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table


# ---------------------------------------------------------------------------
# forward pieces


def reservoir_states(spec: ReservoirSpec, patches: np.ndarray, mask: np.ndarray | None = None,
                     zero_masked: bool = False) -> np.ndarray:
    """Run the reservoir over each window's patches from a zero state.

    With ``zero_masked`` the masked patches are fed as zeros so their content
    cannot leak into later states.
    """
    if zero_masked and mask is not None:
        patches = np.where(mask[..., None], 0, patches).astype(patches.dtype)
    return run_patches(spec, patches)


def embed(params: Params, states: np.ndarray, mask: np.ndarray | None) -> Tensor:
    """Linear projection of reservoir states, mask-token swap, positional offset."""
    w = params["embed.weight"]
    if states.shape[-1] != w.shape[0]:
        raise DimensionError(f"reservoir states {states.shape} vs embed weight {w.shape}")
    dtype = w.dtype
    B, P = states.shape[:2]
    tokens = nx.linear(Tensor(states, dtype=dtype), w, params["embed.bias"])
    if mask is not None and np.any(mask):
        tokens = nx.fill_masked(tokens, mask, params["mask_token"])
    pos = np.broadcast_to(sinusoidal_positions(P, w.shape[1]), (B, P, w.shape[1]))
    return nx.add(tokens, Tensor(pos, dtype=dtype))


def attention(params: Params, prefix: str, x: Tensor, num_heads: int,
              keep: list | None = None) -> Tensor:
    B, P, E = x.shape
    dh = E // num_heads

    def heads(t):
        return nx.transpose(nx.reshape(t, (B, P, num_heads, dh)), (0, 2, 1, 3))

    q = heads(nx.linear(x, params[prefix + "wq"], params[prefix + "bq"]))
    k = heads(nx.linear(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = heads(nx.linear(x, params[prefix + "wv"], params[prefix + "bv"]))
    scores = nx.scale(nx.bmm(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = nx.softmax_lastdim(scores)
    if keep is not None:
        keep.append(weights.data)
    ctx = nx.reshape(nx.transpose(nx.bmm(weights, v), (0, 2, 1, 3)), (B, P, E))
    return nx.linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def encode(params: Params, tokens: Tensor, config: ModelConfig,
           keep_attention: list | None = None) -> Tensor:
    """Pre-norm blocks: ``x + MHSA(LN(x))`` then ``x + FFN(LN(x))``."""
    x = tokens
    eps = config.ln_eps
    for layer in range(config.num_layers):
        p = f"blocks.{layer}."
        h = nx.layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], eps)
        x = nx.add(x, attention(params, p + "attn.", h, config.num_heads, keep_attention))
        h = nx.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], eps)
        h = nx.gelu(nx.linear(h, params[p + "ffn.w1"], params[p + "ffn.b1"]))
        x = nx.add(x, nx.linear(h, params[p + "ffn.w2"], params[p + "ffn.b2"]))
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations after encoder layer {layer}")
    return x


def decode_masked(params: Params, contextual: Tensor, mask: np.ndarray) -> Tensor:
    """Project each masked token back to patch space, in row-major mask order."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("decode_masked needs at least one masked position")
    picked = nx.select_rows(contextual, mask)
    return nx.linear(picked, params["decoder.weight"], params["decoder.bias"])


def masked_mse(recon: Tensor, patches: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over every element of the masked patches."""
    target = Tensor(np.asarray(patches)[np.asarray(mask, dtype=bool)], dtype=recon.dtype)
    return nx.mse(recon, target)


def pretrain_loss(params: Params, spec: ReservoirSpec, config: ModelConfig,
                  windows: np.ndarray, mask: np.ndarray,
                  targets: np.ndarray | None = None) -> Tensor:
    """Masked reconstruction loss for a batch of standardized windows.

    ``targets`` defaults to the windows themselves; passing it separately lets
    callers perturb the encoder input while keeping the reconstruction target.
    """
    dtype = params["embed.weight"].dtype
    windows = np.asarray(windows, dtype=dtype)
    patches = patchify(windows, config.patch_length)
    target_patches = patches if targets is None else patchify(
        np.asarray(targets, dtype=dtype), config.patch_length)
    states = reservoir_states(spec, patches, mask, config.zero_masked_reservoir_input)
    tokens = embed(params, states, mask)
    ctx = encode(params, tokens, config)
    recon = decode_masked(params, ctx, mask)
    return masked_mse(recon, target_patches, mask)


def pooled_features(params: Params, spec: ReservoirSpec, config: ModelConfig,
                    windows: np.ndarray) -> Tensor:
    """Encoder output averaged over patches, no masking."""
    dtype = params["embed.weight"].dtype
    patches = patchify(np.asarray(windows, dtype=dtype), config.patch_length)
    tokens = embed(params, reservoir_states(spec, patches), None)
    return nx.mean(encode(params, tokens, config), axis=1)


def head_output(params: Params, spec: ReservoirSpec, config: ModelConfig,
                windows: np.ndarray) -> Tensor:
    """Raw head output: regression values or class logits."""
    pooled = pooled_features(params, spec, config, windows)
    return nx.linear(pooled, params["head.weight"], params["head.bias"])


def forward_head(params: Params, spec: ReservoirSpec, config: ModelConfig,
                 windows: np.ndarray) -> Tensor:
    """Predictions: K values for regression, class probabilities for classification."""
    out = head_output(params, spec, config, windows)
    if config.head == "classification":
        return nx.softmax_lastdim(out)
    return out


def head_loss(params: Params, spec: ReservoirSpec, config: ModelConfig,
              windows: np.ndarray, targets: np.ndarray) -> Tensor:
    out = head_output(params, spec, config, windows)
    if config.head == "classification":
        return nx.cross_entropy(out, targets)
    return nx.mse(out, Tensor(targets, dtype=out.dtype))
