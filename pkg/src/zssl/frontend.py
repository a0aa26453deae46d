"""Raw-waveform convolutional feature extractor and MFCC-style features.

The extractor is a stack of seven valid 1-D convolutions taking 16 kHz
audio to 50 Hz frames.  The default "optimized" layout normalises only
after the first convolution (a per-channel GroupNorm held at full
precision); the "large" layout applies a full-precision LayerNorm after
every convolution.  :func:`estimate_activation_bytes` prices both layouts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from zssl import numerics as nx

NORMALIZATIONS = ("none", "group_norm_full_precision", "layer_norm_full_precision")
FRAME_RATE = 50
NORM_EPS = 1e-5
FULL_PRECISION_BYTES = 4


class InputTooShortError(ValueError):
    def __init__(self, length: int, minimum: int):
        super().__init__(f"waveform of {length} samples is shorter than the receptive field ({minimum} samples)")
        self.length = length
        self.minimum = minimum


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    normalization: str = "none"

    def __post_init__(self):
        if self.stride < 1 or self.kernel < self.stride:
            raise ValueError(f"need stride >= 1 and kernel >= stride, got kernel={self.kernel} stride={self.stride}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class FrontendConfig:
    layers: tuple[ConvLayerSpec, ...]
    sample_rate: int = 16000
    activation: str = "swoosh_r"

    def __post_init__(self):
        if len(self.layers) != 7:
            raise ValueError(f"frontend needs 7 conv layers, got {len(self.layers)}")
        total = math.prod(layer.stride for layer in self.layers)
        if total * FRAME_RATE != self.sample_rate:
            raise ValueError(f"stride product {total} does not map {self.sample_rate} Hz to {FRAME_RATE} Hz")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError("conv layer channel counts do not chain")
        if self.activation not in ("swoosh_r", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def normalized_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.normalization != "none"]


KERNELS = (10, 3, 3, 3, 3, 2, 2)
STRIDES = (5, 2, 2, 2, 2, 2, 2)


def default_config(channels: int = 512, layout: str = "optimized", activation: str = "swoosh_r") -> FrontendConfig:
    """wav2vec 2.0-style geometry.

    ``layout="optimized"`` puts one GroupNorm after the first layer,
    ``"large"`` a LayerNorm after every layer, ``"none"`` no normalization.
    """
    layers = []
    for i, (k, s) in enumerate(zip(KERNELS, STRIDES)):
        if layout == "optimized":
            norm = "group_norm_full_precision" if i == 0 else "none"
        elif layout == "large":
            norm = "layer_norm_full_precision"
        elif layout == "none":
            norm = "none"
        else:
            raise ValueError(f"unknown layout {layout!r}")
        layers.append(ConvLayerSpec(1 if i == 0 else channels, channels, k, s, norm))
    return FrontendConfig(tuple(layers), activation=activation)


def receptive_field(config: FrontendConfig) -> int:
    need = 1
    for layer in reversed(config.layers):
        need = (need - 1) * layer.stride + layer.kernel
    return need


def output_length(config: FrontendConfig, num_samples: int) -> int:
    t = num_samples
    for layer in config.layers:
        t = nx.conv_output_length(t, layer.kernel, layer.stride)
        if t < 1:
            return 0
    return t


INIT_GAIN = 3.0


def init_params(config: FrontendConfig, rng: np.random.Generator, gain: float = INIT_GAIN) -> dict[str, nx.Tensor]:
    """Conv weights ~ N(0, gain^2 / fan_in).

    SwooshR has slope ~0.19 near zero, so unit gain shrinks the signal by
    about five per layer; a gain of 3 keeps seven layers near unit scale.
    """
    params = {}
    for i, layer in enumerate(config.layers):
        fan_in = layer.kernel * layer.in_channels
        params[f"frontend.conv{i}.weight"] = nx.parameter(
            rng.normal(0.0, gain / math.sqrt(fan_in), size=(layer.kernel, layer.in_channels, layer.out_channels)))
        if layer.normalization != "none":
            params[f"frontend.conv{i}.norm_weight"] = nx.parameter(np.ones(layer.out_channels))
            params[f"frontend.conv{i}.norm_bias"] = nx.parameter(np.full(layer.out_channels, 0.01))
    return params


def _normalize(x: nx.Tensor, kind: str, weight: nx.Tensor, bias: nx.Tensor) -> nx.Tensor:
    # GroupNorm with one channel per group normalises each channel over time;
    # LayerNorm normalises each frame over channels.
    axis = 0 if kind == "group_norm_full_precision" else 1
    centred = x - x.mean(axis=axis, keepdims=True)
    var = (centred * centred).mean(axis=axis, keepdims=True)
    return centred / nx.sqrt(var + NORM_EPS) * weight + bias


def extract(config: FrontendConfig, wave: nx.Tensor, params: dict[str, nx.Tensor]) -> nx.Tensor:
    """Waveform [1 x S] to frames [T x C] at 50 Hz."""
    num_samples = wave.shape[-1]
    minimum = receptive_field(config)
    if num_samples < minimum:
        raise InputTooShortError(num_samples, minimum)
    act = nx.swoosh_r if config.activation == "swoosh_r" else nx.gelu
    x = wave.reshape(num_samples, 1)
    for i, layer in enumerate(config.layers):
        x = nx.conv1d(x, params[f"frontend.conv{i}.weight"], stride=layer.stride)
        if layer.normalization != "none":
            x = _normalize(x, layer.normalization,
                           params[f"frontend.conv{i}.norm_weight"], params[f"frontend.conv{i}.norm_bias"])
        x = act(x)
    return x


def estimate_activation_bytes(config: FrontendConfig, batch: int, seconds: float,
                              norm_bytes_per_elem: int = 2) -> float:
    """Analytic activation footprint of one forward pass over ``batch`` clips.

    Frame counts use the continuous rate of each layer, so the estimate is
    exactly linear in ``batch`` and ``seconds``.  Per layer we count the
    conv output and the activation output at the training width
    ``norm_bytes_per_elem``; a full-precision normalization additionally
    materialises its upcast input and its output at 4 bytes each.
    """
    width = norm_bytes_per_elem
    rate = float(config.sample_rate)
    total = batch * seconds * rate * width  # input waveform
    for layer in config.layers:
        rate /= layer.stride
        elems = batch * seconds * rate * layer.out_channels
        total += 2 * elems * width
        if layer.normalization != "none":
            total += 2 * elems * FULL_PRECISION_BYTES
    return total


# ------------------------------------------------------------------ MFCC path

WINDOW = 400
HOP = 160
N_FFT = 512
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, sample_rate: int = 16000, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular filters with unit peak, shape [n_mels x n_fft//2+1]."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def num_frames(num_samples: int) -> int:
    return (num_samples - WINDOW) // HOP + 1


def log_mel(wave, n_mels: int = 40, sample_rate: int = 16000) -> np.ndarray:
    x = np.asarray(wave.data if isinstance(wave, nx.Tensor) else wave, dtype=np.float64).reshape(-1)
    if x.size < WINDOW:
        raise InputTooShortError(x.size, WINDOW)
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP]
    spec = np.abs(np.fft.rfft(frames * np.hamming(WINDOW), n=N_FFT)) ** 2
    energies = spec @ mel_filterbank(n_mels, sample_rate).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def deltas(feats: np.ndarray, width: int = 2) -> np.ndarray:
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    t = feats.shape[0]
    num = sum(n * (padded[width + n:width + n + t] - padded[width - n:width - n + t]) for n in range(1, width + 1))
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def mfcc_like(wave, n_mels: int = 40, n_ceps: int = 39, sample_rate: int = 16000) -> np.ndarray:
    """Log-mel energies -> orthonormal DCT-II cepstra.

    ``n_ceps=39`` gives 13 cepstra with deltas and delta-deltas appended.
    """
    lm = log_mel(wave, n_mels, sample_rate)
    base = 13 if n_ceps == 39 else n_ceps
    ceps = dct(lm, type=2, norm="ortho", axis=1)[:, :base]
    if n_ceps == 39:
        d1 = deltas(ceps)
        ceps = np.concatenate([ceps, d1, deltas(d1)], axis=1)
    return ceps

