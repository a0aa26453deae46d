"""Frontend + encoder + heads, as used by the training stages."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from zssl import asr
from zssl import encoder as enc
from zssl import frontend as fe
from zssl import numerics as nx
from zssl import objective as obj

PRETRAIN_ONLY = ("head.", "model.mask_embed")
BACKBONE_PREFIXES = ("frontend.", "encoder.", "model.")
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    frontend: fe.FrontendConfig
    encoder: enc.EncoderConfig

    @classmethod
    def from_run(cls, cfg) -> "ModelConfig":
        return cls(fe.default_config(cfg.frontend_channels, cfg.frontend_layout), enc.profile(cfg.profile))


def _dense(rng, fan_in, fan_out, gain=1.0):
    return nx.parameter(rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out)))


def init_backbone(mc: ModelConfig, rng: np.random.Generator) -> dict[str, nx.Tensor]:
    p = fe.init_params(mc.frontend, rng)
    p.update(enc.init_params(mc.encoder, rng))
    c = mc.frontend.layers[-1].out_channels
    p["model.feat_norm.bias"] = nx.parameter(rng.normal(0.0, 0.01, size=c))
    p["model.feat_norm.log_scale"] = nx.parameter(np.array(0.0))
    p["model.input_proj"] = _dense(rng, mc.frontend.layers[-1].out_channels, mc.encoder.input_dim)
    return p


def init_pretrain(mc: ModelConfig, rng: np.random.Generator, num_units: int, loss: str = "ce",
                  hubert_dim: int = 32) -> dict[str, nx.Tensor]:
    p = init_backbone(mc, rng)
    d = mc.encoder.input_dim
    p["model.mask_embed"] = nx.parameter(rng.normal(0.0, 1.0, size=d))
    if loss == "ce":
        p["head.projection"] = _dense(rng, mc.encoder.output_dim, num_units, HEAD_INIT_SCALE)
    else:
        p["head.projection"] = _dense(rng, mc.encoder.output_dim, hubert_dim)
        p["head.embeddings"] = nx.parameter(rng.normal(0.0, 1.0, size=(num_units, hubert_dim)))
    return p


def init_ctc_head(mc: ModelConfig, rng: np.random.Generator) -> dict[str, nx.Tensor]:
    return {
        "ctc.projection": _dense(rng, mc.encoder.output_dim, len(asr.VOCAB), HEAD_INIT_SCALE),
        "ctc.bias": nx.parameter(rng.normal(0.0, 0.01, size=len(asr.VOCAB))),
    }


def num_frames(mc: ModelConfig, num_samples: int) -> int:
    return fe.output_length(mc.frontend, num_samples)


def encode(mc: ModelConfig, params: dict, wave: np.ndarray, mask: obj.MaskSet | None = None,
           info: enc.ForwardInfo | None = None) -> nx.Tensor:
    feats = fe.extract(mc.frontend, nx.Tensor(wave[None, :]), params)
    feats = nx.bias_norm(feats, params["model.feat_norm.bias"], params["model.feat_norm.log_scale"])
    x = feats @ params["model.input_proj"]
    if mask is not None:
        x = obj.apply_mask(x, mask, params["model.mask_embed"])
    return enc.forward(mc.encoder, x, params, info)


def pretrain_scores(params: dict, o: nx.Tensor, loss: str, tau: float) -> nx.Tensor:
    if loss == "ce":
        return o @ params["head.projection"]
    return obj.cosine_scores(o @ params["head.projection"], params["head.embeddings"], tau)


def pretrain_loss(params: dict, o: nx.Tensor, labels, mask, loss: str, tau: float) -> nx.Tensor:
    if loss == "ce":
        return obj.ce_loss(params["head.projection"], o, labels, mask)
    head = obj.PredictionHead(params["head.projection"], params["head.embeddings"], tau)
    return obj.hubert_loss(head, o, labels, mask)


def ctc_log_probs(params: dict, o: nx.Tensor) -> nx.Tensor:
    return nx.log_softmax(o @ params["ctc.projection"] + params["ctc.bias"], axis=-1)


def shape_diff(expected: dict, found: dict) -> list[str]:
    """Human-readable mismatches between expected tensors and a checkpoint."""
    lines = []
    for name in sorted(expected):
        want = tuple(expected[name].shape)
        if name not in found:
            lines.append(f"missing {name} {want}")
        elif tuple(found[name].shape) != want:
            lines.append(f"{name}: expected {want}, checkpoint has {tuple(found[name].shape)}")
    return lines
