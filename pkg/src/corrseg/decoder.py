"""Coarse-to-fine fusion of per-stage matching outputs and the mask head."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .pyramid import from_tokens, scoped, to_tokens
from .tensor import Tensor


def init_decoder(rng: np.random.Generator, channels: Sequence[int], norm: bool = False
                 ) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    L = len(channels)
    for l, c in enumerate(channels, start=1):
        pre = f"dec{l}."
        if norm:
            p[pre + "ln.g"] = np.ones(c)
            p[pre + "ln.b"] = np.zeros(c)
        p[pre + "mlp.w1"] = rng.normal(0, np.sqrt(2.0 / c), (c, 2 * c))
        p[pre + "mlp.b1"] = np.zeros(2 * c)
        p[pre + "mlp.w2"] = rng.normal(0, np.sqrt(1.0 / (2 * c)), (2 * c, c))
        p[pre + "mlp.b2"] = np.zeros(c)
        if l < L:
            p[pre + "proj.w"] = rng.normal(0, np.sqrt(1.0 / channels[l]), (channels[l], c))
    p["head.w"] = rng.normal(0, np.sqrt(1.0 / channels[0]), (channels[0], 2))
    p["head.b"] = np.zeros(2)
    return p


def align_coarse(coarse: Tensor, p: Mapping[str, Tensor], size: tuple[int, int]) -> Tensor:
    """1x1 channel projection then bilinear resize to ``size``.

    Both maps are linear and act on different axes, so the order is
    immaterial; projecting first is cheaper.
    """
    _, h, w = coarse.shape
    projected = from_tokens(T.matmul(to_tokens(coarse), p["proj.w"]), h, w)
    return T.bilinear_resize(projected, *size)


def fuse_stage(x: Tensor, coarse: Tensor | None, p: Mapping[str, Tensor]) -> Tensor:
    """ReLU(MLP(x + up)) + up, with up the aligned coarser output (zero at the deepest stage)."""
    x = T.as_tensor(x)
    c, h, w = x.shape
    if coarse is None:
        up = Tensor(np.zeros((c, h, w)))
    else:
        up = align_coarse(coarse, p, (h, w))
    s = to_tokens(T.add(x, up))
    if "ln.g" in p:
        s = T.layer_norm(s, p["ln.g"], p["ln.b"])
    hidden = T.relu(T.add(T.matmul(s, p["mlp.w1"]), p["mlp.b1"]))
    m = T.add(T.matmul(hidden, p["mlp.w2"]), p["mlp.b2"])
    return T.add(T.relu(from_tokens(m, h, w)), up)


def decode(stage_outputs: Sequence[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    """Run the fusion from the deepest stage up to stage 1; returns X'_1."""
    out = None
    for l in range(len(stage_outputs), 0, -1):
        out = fuse_stage(stage_outputs[l - 1], out, scoped(params, f"dec{l}."))
    return out


def predict_mask(x1: Tensor, params: Mapping[str, Tensor], height: int, width: int) -> Tensor:
    """1x1 convolution to two logits, then bilinear upsampling to ``[2, height, width]``."""
    _, h, w = x1.shape
    logits = T.add(T.matmul(to_tokens(x1), params["head.w"]), params["head.b"])
    return T.bilinear_resize(from_tokens(logits, h, w), height, width)


def hard_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; 1 = foreground."""
    logits = np.asarray(getattr(logits, "data", logits))
    return (logits[1] > logits[0]).astype(np.uint8)
