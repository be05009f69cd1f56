"""Fixed random encoder and the decoupled self-attention feature pyramid.

Query and support images go through the same encoder and the same
per-stage blocks, independently: nothing in this module mixes the two.
Feature maps are ``[c, h, w]``; inside a block they are handled as token
matrices ``[h*w, c]`` (row-major spatial order).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderParams:
    """Two 3x3 stride-2 convolutions; frozen, never differentiated."""

    w1: np.ndarray  # [c_mid, 3, 3, 3]
    b1: np.ndarray
    w2: np.ndarray  # [c_out, c_mid, 3, 3]
    b2: np.ndarray
    seed: int

    @property
    def out_channels(self) -> int:
        return self.w2.shape[0]


def make_encoder(seed: int, out_channels: int = 16, mid_channels: int = 32) -> EncoderParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4C]))
    w1 = rng.normal(0.0, np.sqrt(2.0 / 27), size=(mid_channels, 3, 3, 3))
    b1 = rng.normal(0.0, 0.1, size=mid_channels)
    w2 = rng.normal(0.0, np.sqrt(2.0 / (9 * mid_channels)), size=(out_channels, mid_channels, 3, 3))
    b2 = rng.normal(0.0, 0.1, size=out_channels)
    return EncoderParams(w1, b1, w2, b2, seed)


def _conv3x3_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    c, h, wd = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::2, ::2]  # [c, h/2, w/2, 3, 3]
    return np.einsum("cyxij,ocij->oyx", win, w, optimize=True) + b[:, None, None]


def encode(image: np.ndarray, params: EncoderParams, num_stages: int = 3) -> np.ndarray:
    """Map an image ``[3, H, W]`` in [0, 1] to base features ``[c1, H/4, W/4]``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected an image of shape [3, H, W], got {image.shape}")
    div = 2 ** (num_stages + 2)
    if image.shape[1] % div or image.shape[2] % div:
        raise ShapeError(f"image extents {image.shape[1:]} must be divisible by {div}")
    x = np.maximum(_conv3x3_s2(image - 0.5, params.w1, params.b1), 0.0)
    return _conv3x3_s2(x, params.w2, params.b2)


# --------------------------------------------------------------------------
# learnable stages


def init_stage(rng: np.random.Generator, c: int, c_next: int | None) -> dict[str, np.ndarray]:
    """Weights of one pyramid stage; ``c_next`` adds the downsampling expansion."""
    s = 1.0 / np.sqrt(c)
    p = {
        "ln1.g": np.ones(c), "ln1.b": np.zeros(c),
        "attn.wq": rng.normal(0, s, (c, c)),
        "attn.wk": rng.normal(0, s, (c, c)),
        "attn.wv": rng.normal(0, s, (c, c)),
        "attn.wo": rng.normal(0, 0.5 * s, (c, c)),
        "ln2.g": np.ones(c), "ln2.b": np.zeros(c),
        "mlp.w1": rng.normal(0, np.sqrt(2.0 / c), (c, 2 * c)),
        "mlp.b1": np.zeros(2 * c),
        "mlp.w2": rng.normal(0, 0.5 / np.sqrt(2 * c), (2 * c, c)),
        "mlp.b2": np.zeros(c),
    }
    if c_next is not None:
        if c_next <= c:
            raise ValueError(f"stage channels must grow, got {c} -> {c_next}")
        p["expand.w"] = rng.normal(0, np.sqrt(1.0 / c), (c, c_next))
        p["expand.b"] = np.zeros(c_next)
    return p


def to_tokens(f: Tensor) -> Tensor:
    """[c, h, w] -> [h*w, c]."""
    c, h, w = f.shape
    return T.transpose(T.reshape(f, (c, h * w)))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """[h*w, c] -> [c, h, w]."""
    return T.reshape(T.transpose(x), (x.shape[1], h, w))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for token matrices."""
    d = q.shape[1]
    scores = T.scalar_mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d))
    return T.matmul(T.softmax(scores, axis=1), v)


def self_attention_block(f: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Pre-norm transformer block over the spatial tokens of ``f``."""
    f = T.as_tensor(f)
    _, h, w = f.shape
    x = to_tokens(f)
    y = T.layer_norm(x, p["ln1.g"], p["ln1.b"])
    a = attention(y @ p["attn.wq"], y @ p["attn.wk"], y @ p["attn.wv"])
    x = x + a @ p["attn.wo"]
    y = T.layer_norm(x, p["ln2.g"], p["ln2.b"])
    m = T.relu(y @ p["mlp.w1"] + p["mlp.b1"]) @ p["mlp.w2"] + p["mlp.b2"]
    x = x + m
    return from_tokens(x, h, w)


def downsample(f: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """2x2 average pooling followed by a 1x1 channel expansion."""
    pooled = T.avg_pool2x2(f)
    _, h, w = pooled.shape
    return from_tokens(to_tokens(pooled) @ p["expand.w"] + p["expand.b"], h, w)


def scoped(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def build_pyramid(base: Tensor, params: Mapping[str, Tensor], num_stages: int) -> list[Tensor]:
    """Stage 1 is a block on ``base``; each later stage downsamples then applies its block.

    ``params`` holds every stage under keys ``"pyr{l}.<name>"`` (l from 1).
    """
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    base = T.as_tensor(base)
    _, h, w = base.shape
    div = 2 ** (num_stages - 1)
    if h % div or w % div:
        raise ShapeError(f"base extents {h}x{w} not divisible by {div}")
    stages = [self_attention_block(base, scoped(params, "pyr1."))]
    for l in range(2, num_stages + 1):
        down = downsample(stages[-1], scoped(params, f"pyr{l - 1}."))
        stages.append(self_attention_block(down, scoped(params, f"pyr{l}.")))
    return stages
