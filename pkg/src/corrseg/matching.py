"""Correlation-based matching between query and support features.

Weights follow the column-vector convention: a feature row ``f`` is mapped
to ``W f``, i.e. token matrices are right-multiplied by ``W.T``.  ``W^o``
therefore has shape ``[c, c+1]`` and consumes the retrieved features with
the prior mask appended as one extra channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .pyramid import attention, from_tokens, to_tokens
from .tensor import NumericalError, ShapeError, Tensor

NORMALIZATIONS = ("inverse_softmax", "softmax", "none")


@dataclass
class CorrelationMap:
    """Query-by-support similarity matrix of one pyramid stage."""

    values: Tensor  # [hq*wq, hs*ws]
    stage: int
    query_size: tuple[int, int]
    support_size: tuple[int, int]


def init_matching(rng: np.random.Generator, c: int) -> dict[str, np.ndarray]:
    s = 1.0 / np.sqrt(c)
    return {
        "wq": rng.normal(0, s, (c, c)),
        "wk": rng.normal(0, s, (c, c)),
        "wv": rng.normal(0, 0.1 * s, (c, c)),
        "wo": rng.normal(0, 1.0 / np.sqrt(c + 1), (c, c + 1)),
    }


def check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("support mask must be binary {0, 1}")
    return mask


def transform_features(fq: Tensor, fs: Tensor, ms: np.ndarray) -> tuple[Tensor, Tensor]:
    """Flatten query features; mask then flatten support features."""
    fq, fs = T.as_tensor(fq), T.as_tensor(fs)
    ms = check_binary(ms)
    if ms.shape != fs.shape[1:]:
        raise ShapeError(f"mask {ms.shape} does not match support features {fs.shape[1:]}")
    return to_tokens(fq), to_tokens(T.mul(fs, ms[None]))


def correlation(fq_hat: Tensor, fs_hat: Tensor, wq: Tensor, wk: Tensor, t: float = 0.1) -> Tensor:
    """Cosine similarity of projected query and support rows, divided by ``t``.

    Support rows whose projection is exactly zero (masked-out positions)
    get correlation 0 against every query; a zero query projection raises.
    """
    if t <= 0:
        raise ValueError("temperature t must be positive")
    q = T.matmul(fq_hat, T.transpose(wq))
    k = T.matmul(fs_hat, T.transpose(wk))
    n_support = k.shape[0]
    live = np.flatnonzero(np.any(k.data != 0, axis=1))
    if live.size == 0:
        return Tensor(np.zeros((q.shape[0], n_support)))
    qn = T.normalize_rows(q)
    kn = T.normalize_rows(k if live.size == n_support else T.take(k, live, axis=0))
    c = T.scalar_mul(T.matmul(qn, T.transpose(kn)), 1.0 / t)
    if live.size == n_support:
        return c
    return T.scatter(c, live, n_support, axis=1)


def inverse_softmax(c: Tensor) -> Tensor:
    """Normalize along the query axis: every support column sums to one."""
    return T.softmax(c, axis=0)


def normalize_correlation(c: Tensor, kind: str) -> Tensor:
    if kind == "inverse_softmax":
        return inverse_softmax(c)
    if kind == "softmax":
        return T.softmax(c, axis=1)
    if kind == "none":
        return c
    raise ValueError(f"unknown normalization {kind!r}; expected one of {NORMALIZATIONS}")


def prior_mask(fq: np.ndarray, fs: np.ndarray, ms: np.ndarray) -> np.ndarray:
    """Max cosine similarity of each query pixel to the masked support pixels, min-max scaled.

    Computed on frozen features, so it is a constant for the gradient.  A
    map with max == min comes back as all zeros.
    """
    fq = np.asarray(getattr(fq, "data", fq))
    fs = np.asarray(getattr(fs, "data", fs))
    ms = check_binary(ms)
    c, hq, wq = fq.shape
    q = fq.reshape(c, -1).T
    s = fs.reshape(c, -1).T[ms.reshape(-1) > 0]
    if s.shape[0] == 0:
        raise ValueError("prior mask needs at least one foreground support pixel")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    sn = np.linalg.norm(s, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(sn == 0):
        raise NumericalError("zero feature vector in prior mask")
    sim = ((q / qn) @ (s / sn).T).max(axis=1)
    lo, hi = sim.min(), sim.max()
    if hi == lo:
        return np.zeros((hq, wq))
    return ((sim - lo) / (hi - lo)).reshape(hq, wq)


def project_output(retrieved: Tensor, prior: np.ndarray, wo: Tensor, size: tuple[int, int]) -> Tensor:
    """Append the prior as one channel and map back to ``c`` channels with ``W^o``."""
    prior_col = np.asarray(prior, dtype=np.float64).reshape(-1, 1)
    if prior_col.shape[0] != retrieved.shape[0]:
        raise ShapeError("prior mask size does not match the query map")
    stacked = T.concat([retrieved, Tensor(prior_col)], axis=1)
    return from_tokens(T.matmul(stacked, T.transpose(wo)), *size)


def match(fq: Tensor, fs: Tensor, ms: np.ndarray, prior: np.ndarray, p: Mapping[str, Tensor],
          t: float = 0.1, normalization: str = "inverse_softmax", stage: int = 1,
          ) -> tuple[Tensor, CorrelationMap]:
    """Correlation matching; returns the enriched query map ``[c, hq, wq]`` and the raw map."""
    fq, fs = T.as_tensor(fq), T.as_tensor(fs)
    fq_hat, fs_hat = transform_features(fq, fs, ms)
    c = correlation(fq_hat, fs_hat, p["wq"], p["wk"], t)
    weights = normalize_correlation(c, normalization)
    values = T.matmul(fs_hat, T.transpose(p["wv"]))
    retrieved = T.matmul(weights, values)
    size = fq.shape[1:]
    x = project_output(retrieved, prior, p["wo"], size)
    return x, CorrelationMap(c, stage, size, fs.shape[1:])


def cross_attention_retrieve(fq_hat: Tensor, fs_hat: Tensor, p: Mapping[str, Tensor]
                             ) -> tuple[Tensor, Tensor]:
    """Dot-product cross-attention; returns (retrieved rows, pre-softmax scores)."""
    q = T.matmul(fq_hat, T.transpose(p["wq"]))
    k = T.matmul(fs_hat, T.transpose(p["wk"]))
    v = T.matmul(fs_hat, T.transpose(p["wv"]))
    scores = T.scalar_mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    return attention(q, k, v), scores


def cross_attention_match(fq: Tensor, fs: Tensor, ms: np.ndarray, prior: np.ndarray,
                          p: Mapping[str, Tensor], stage: int = 1) -> tuple[Tensor, CorrelationMap]:
    """Baseline matching with standard cross-attention in place of cosine correlation."""
    fq, fs = T.as_tensor(fq), T.as_tensor(fs)
    fq_hat, fs_hat = transform_features(fq, fs, ms)
    retrieved, scores = cross_attention_retrieve(fq_hat, fs_hat, p)
    size = fq.shape[1:]
    x = project_output(retrieved, prior, p["wo"], size)
    return x, CorrelationMap(scores, stage, size, fs.shape[1:])
