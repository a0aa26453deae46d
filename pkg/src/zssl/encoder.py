"""Zipformer-style multi-rate encoder.

Six stacks run at 50, 25, 12.5, 6.25, 12.5 and 25 Hz (downsample factors
1, 2, 4, 8, 4, 2 relative to the 50 Hz input).  Between stacks the channel
count is truncated or zero-padded; each downsampled stack is upsampled back
to 50 Hz and blended with its input through a learned per-channel bypass.
The encoder output has the widest stack's width, each channel taken from
the most recent stack that has it.

Every block computes its attention weights once and reuses them in a
non-linear attention module and two self-attention modules.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from zssl import numerics as nx

UNET_FACTORS = (1, 2, 4, 8, 4, 2)


@dataclass(frozen=True)
class StackConfig:
    downsample_factor: int
    embed_dim: int
    num_blocks: int
    attention_heads: int
    feedforward_dim: int
    conv_kernel: int = 15

    def __post_init__(self):
        if self.downsample_factor not in (1, 2, 4, 8):
            raise ValueError(f"downsample factor must be 1, 2, 4 or 8, got {self.downsample_factor}")
        if self.embed_dim % self.attention_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.attention_heads} heads")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.attention_heads


@dataclass(frozen=True)
class EncoderConfig:
    stacks: tuple[StackConfig, ...]
    pos_radius: int = 16
    unet: bool = True

    def __post_init__(self):
        if not self.stacks:
            raise ValueError("encoder needs at least one stack")
        factors = tuple(s.downsample_factor for s in self.stacks)
        if self.unet and factors != UNET_FACTORS[:len(factors)]:
            raise ValueError(f"stack factors {factors} break the (1,2,4,8,4,2) U-Net layout")

    @property
    def output_dim(self) -> int:
        return max(s.embed_dim for s in self.stacks)

    @property
    def input_dim(self) -> int:
        return self.stacks[0].embed_dim


def _profile(dims, blocks, heads, ff, kernel=31) -> EncoderConfig:
    return EncoderConfig(tuple(
        StackConfig(f, d, b, h, m, kernel) for f, d, b, h, m in zip(UNET_FACTORS, dims, blocks, heads, ff)))


PROFILES = {
    "base": lambda: _profile((192, 256, 384, 512, 384, 256), (2, 2, 3, 4, 3, 2), (4, 4, 4, 8, 4, 4),
                             (512, 768, 1024, 1536, 1024, 768)),
    "desk": lambda: _profile((32, 32, 48, 64, 48, 32), (1, 1, 1, 1, 1, 1), (2, 2, 2, 4, 2, 2),
                             (64, 64, 96, 128, 96, 64), kernel=15),
    "tiny": lambda: _profile((8, 8, 12, 16, 12, 8), (1, 1, 1, 1, 1, 1), (2, 2, 2, 2, 2, 2),
                             (16, 16, 16, 16, 16, 16), kernel=3),
}


def profile(name: str) -> EncoderConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ValueError(f"unknown encoder profile {name!r}; choose from {sorted(PROFILES)}") from None


def transformer_geometry(config: EncoderConfig) -> EncoderConfig:
    """Same widths and depths, every stack at the full 50 Hz rate."""
    return EncoderConfig(tuple(replace(s, downsample_factor=1) for s in config.stacks),
                         pos_radius=config.pos_radius, unet=False)


def stack_lengths(config: EncoderConfig, num_frames: int) -> list[int]:
    return [math.ceil(num_frames / s.downsample_factor) for s in config.stacks]


def analytic_attention_flops(config: EncoderConfig, num_frames: int) -> int:
    """FLOPs of the T^2 attention products (scores plus the three weighted sums)."""
    total = 0
    for s, t in zip(config.stacks, stack_lengths(config, num_frames)):
        per_block = 2 * s.attention_heads * t * t * s.head_dim  # q k^T
        per_block += 2 * t * t * (s.embed_dim // 2)  # non-linear attention, head 0
        per_block += 2 * 2 * s.attention_heads * t * t * s.head_dim  # two self-attention modules
        total += s.num_blocks * per_block
    return total


# ------------------------------------------------------------------ resampling


def downsample(x: nx.Tensor, factor: int, weights: nx.Tensor) -> nx.Tensor:
    """Convex combination of each group of ``factor`` frames.

    The tail group is padded by repeating the last frame.
    """
    t, d = x.shape
    groups = -(-t // factor)
    pad = groups * factor - t
    if pad:
        x = nx.concat([x, x[np.full(pad, t - 1)]], axis=0)
    w = nx.softmax(weights, axis=0).reshape(1, factor, 1)
    return (x.reshape(groups, factor, d) * w).sum(axis=1)


def upsample(x: nx.Tensor, factor: int) -> nx.Tensor:
    return x[np.repeat(np.arange(x.shape[0]), factor)]


def match_channels(x: nx.Tensor, d_out: int) -> nx.Tensor:
    d_in = x.shape[1]
    if d_in == d_out:
        return x
    if d_in > d_out:
        return x[:, :d_out]
    return nx.concat([x, nx.Tensor(np.zeros((x.shape[0], d_out - d_in)))], axis=1)


def assemble_output(stack_outputs: Sequence[nx.Tensor]) -> nx.Tensor:
    """Channel d comes from the last stack whose width exceeds d."""
    if not stack_outputs:
        raise nx.ContractError("assemble_output needs at least one stack output")
    widths = [o.shape[1] for o in stack_outputs]
    owner = [max(i for i, w in enumerate(widths) if w > d) for d in range(max(widths))]
    pieces = []
    start = 0
    for d in range(1, len(owner) + 1):
        if d == len(owner) or owner[d] != owner[start]:
            pieces.append(stack_outputs[owner[start]][:, start:d])
            start = d
    return pieces[0] if len(pieces) == 1 else nx.concat(pieces, axis=1)


# ---------------------------------------------------------------------- params


def _linear(rng, fan_in, fan_out, gain=1.0):
    return nx.parameter(rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out)))


def _locality_prior(heads: int, radius: int) -> np.ndarray:
    """Bias -slope_h * |offset| with slopes 1, 1/2, 1/4, ... per head.

    Random query/key projections give near-uniform attention over the whole
    sequence; starting local lets masked frames see their neighbours from
    the first step.
    """
    slopes = 2.0 ** -np.arange(heads)
    return -slopes[:, None] * np.abs(np.arange(-radius, radius + 1))[None, :]


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, nx.Tensor]:
    p: dict[str, nx.Tensor] = {}
    for i, s in enumerate(config.stacks):
        pre = f"encoder.stack{i}"
        d, f = s.embed_dim, s.feedforward_dim
        if s.downsample_factor > 1:
            p[f"{pre}.downsample"] = nx.parameter(rng.normal(0.0, 0.1, size=s.downsample_factor))
            p[f"{pre}.bypass"] = nx.parameter(np.full(d, 0.5))
        for j in range(s.num_blocks):
            b = f"{pre}.block{j}"
            p[f"{b}.attn.query"] = _linear(rng, d, d)
            p[f"{b}.attn.key"] = _linear(rng, d, d)
            p[f"{b}.attn.pos_bias"] = nx.parameter(_locality_prior(s.attention_heads, config.pos_radius)
                                                   + rng.normal(0.0, 0.1, size=(s.attention_heads, 2 * config.pos_radius + 1)))
            for ff in ("ff1", "ff2", "ff3"):
                p[f"{b}.{ff}.in"] = _linear(rng, d, f)
                p[f"{b}.{ff}.out"] = _linear(rng, f, d, 0.5)
            h = d // 2
            p[f"{b}.nonlin.in"] = _linear(rng, d, 3 * h)
            p[f"{b}.nonlin.out"] = _linear(rng, h, d, 0.5)
            for sa in ("self_attn1", "self_attn2"):
                p[f"{b}.{sa}.value"] = _linear(rng, d, d)
                p[f"{b}.{sa}.out"] = _linear(rng, d, d, 0.5)
            for cv in ("conv1", "conv2"):
                p[f"{b}.{cv}.in"] = _linear(rng, d, 2 * d)
                p[f"{b}.{cv}.depthwise"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(s.conv_kernel), size=(s.conv_kernel, d)))
                p[f"{b}.{cv}.out"] = _linear(rng, d, d, 0.5)
            p[f"{b}.norm.bias"] = nx.parameter(rng.normal(0.0, 0.01, size=d))
            p[f"{b}.norm.log_scale"] = nx.parameter(np.array(0.0))
    return p


# ----------------------------------------------------------------------- block


def _relative_index(t: int, radius: int) -> np.ndarray:
    pos = np.arange(t)
    return np.clip(pos[None, :] - pos[:, None], -radius, radius) + radius


def attention_weights(x: nx.Tensor, p: dict, b: str, s: StackConfig, radius: int) -> nx.Tensor:
    t = x.shape[0]
    h, dk = s.attention_heads, s.head_dim
    q = nx.transpose((x @ p[f"{b}.attn.query"]).reshape(t, h, dk), (1, 0, 2))
    k = nx.transpose((x @ p[f"{b}.attn.key"]).reshape(t, h, dk), (1, 2, 0))
    with nx.flop_scope("attention"):
        scores = (q @ k) * (1.0 / math.sqrt(dk))
    bias = p[f"{b}.attn.pos_bias"][:, _relative_index(t, radius)]
    return nx.attention_softmax(scores + bias)


def _feedforward(x, p, name):
    return nx.swoosh_l(x @ p[f"{name}.in"]) @ p[f"{name}.out"]


def _nonlin_attention(x, weights, p, name):
    t, d = x.shape
    h = d // 2
    proj = x @ p[f"{name}.in"]
    gate, val, post = proj[:, :h], proj[:, h:2 * h], proj[:, 2 * h:]
    with nx.flop_scope("attention"):
        mixed = weights[0] @ (val * nx.tanh(gate))
    return (mixed * post) @ p[f"{name}.out"]


def _self_attention(x, weights, p, name, s: StackConfig):
    t = x.shape[0]
    v = nx.transpose((x @ p[f"{name}.value"]).reshape(t, s.attention_heads, s.head_dim), (1, 0, 2))
    with nx.flop_scope("attention"):
        ctx = weights @ v
    return nx.transpose(ctx, (1, 0, 2)).reshape(t, s.embed_dim) @ p[f"{name}.out"]


def _conv_module(x, p, name):
    d = x.shape[1]
    proj = x @ p[f"{name}.in"]
    glu = proj[:, :d] * nx.sigmoid(proj[:, d:])
    return nx.swoosh_r(nx.depthwise_conv1d(glu, p[f"{name}.depthwise"])) @ p[f"{name}.out"]


def block_forward(x: nx.Tensor, p: dict, b: str, s: StackConfig, radius: int,
                  capture: list | None = None) -> nx.Tensor:
    weights = attention_weights(x, p, b, s, radius)
    if capture is not None:
        capture.append(weights)
    x = x + _feedforward(x, p, f"{b}.ff1")
    x = x + _nonlin_attention(x, weights, p, f"{b}.nonlin")
    x = x + _self_attention(x, weights, p, f"{b}.self_attn1", s)
    x = x + _conv_module(x, p, f"{b}.conv1")
    x = x + _feedforward(x, p, f"{b}.ff2")
    x = x + _self_attention(x, weights, p, f"{b}.self_attn2", s)
    x = x + _conv_module(x, p, f"{b}.conv2")
    x = x + _feedforward(x, p, f"{b}.ff3")
    return nx.bias_norm(x, p[f"{b}.norm.bias"], p[f"{b}.norm.log_scale"])


@dataclass
class ForwardInfo:
    stack_lengths: list[int] = field(default_factory=list)
    stack_outputs: list[nx.Tensor] = field(default_factory=list)
    attention: list[nx.Tensor] = field(default_factory=list)


def forward(config: EncoderConfig, x: nx.Tensor, params: dict, info: ForwardInfo | None = None) -> nx.Tensor:
    """Encode [T x input_dim] frames to [T x output_dim] at the input rate."""
    t = x.shape[0]
    if t < 1:
        raise nx.ContractError("encoder needs at least one frame")
    if x.shape[1] != config.input_dim:
        raise nx.DimensionError(f"encoder input width {x.shape[1]} != stack-1 embed_dim {config.input_dim}")
    outputs = []
    for i, s in enumerate(config.stacks):
        x = match_channels(x, s.embed_dim)
        f = s.downsample_factor
        y = downsample(x, f, params[f"encoder.stack{i}.downsample"]) if f > 1 else x
        if info is not None:
            info.stack_lengths.append(y.shape[0])
        for j in range(s.num_blocks):
            b = f"encoder.stack{i}.block{j}"
            y = block_forward(y, params, b, s, config.pos_radius, None if info is None else info.attention)
            if not np.all(np.isfinite(y.data)):
                raise nx.NumericError(f"non-finite activations in stack {i} block {j}")
        if f > 1:
            y = upsample(y, f)[:t]
            y = x + params[f"encoder.stack{i}.bypass"] * (y - x)
        x = y
        outputs.append(x)
    if info is not None:
        info.stack_outputs = outputs
    return assemble_output(outputs)

