"""Correlation-map distillation from deeper to shallower stages.

Each stage's correlation map is reduced to one score per query position
(mean over foreground support columns), turned into a spatial distribution
with a temperature softmax, and pulled towards the next deeper stage's
distribution with a KL term.  The deepest stage is pulled towards the
downsampled ground-truth query mask.  Teachers are constants: no gradient
flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .matching import CorrelationMap
from .tensor import Tensor

STUDENT_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 1.0
    t2_scale: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("distillation temperature must be positive")


def reduce_map(c: Tensor, support_mask: np.ndarray) -> Tensor:
    """Mean of every query row over the support columns with mask > 0."""
    keep = (np.asarray(support_mask).reshape(-1) > 0).astype(np.float64)
    n = keep.sum()
    if n == 0:
        raise ValueError("support mask is empty at this stage resolution")
    if keep.shape[0] != c.shape[1]:
        raise ValueError(f"mask has {keep.shape[0]} entries, map has {c.shape[1]} columns")
    return T.reshape(T.matmul(c, (keep / n).reshape(-1, 1)), (c.shape[0],))


def spatial_softmax(reduced: Tensor, temperature: float = 1.0) -> Tensor:
    return T.softmax(T.scalar_mul(reduced, 1.0 / temperature), axis=0)


def _plogp(p: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz])))


def kl_pair_loss(teacher: np.ndarray, student: Tensor) -> Tensor:
    """KL(teacher || student); ``teacher`` is a plain array and receives no gradient."""
    teacher = np.asarray(getattr(teacher, "data", teacher), dtype=np.float64).reshape(-1)
    if teacher.shape[0] != student.shape[0]:
        raise ValueError("teacher and student sizes differ")
    cross = T.sum(T.mul(T.log(T.clip_min(student, STUDENT_FLOOR)), teacher))
    return T.sub(_plogp(teacher), cross)


def area_downsample(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape
    if H % h or W % w:
        raise ValueError(f"cannot area-average {H}x{W} to {h}x{w}")
    return mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def ground_truth_teacher(query_mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-averaged query mask at ``size``, normalized to a distribution (flattened)."""
    pooled = area_downsample(query_mask, *size).reshape(-1)
    total = pooled.sum()
    if total == 0:
        raise ValueError("query mask has no foreground pixel")
    return pooled / total


def resize_distribution(p: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a flattened spatial distribution, renormalized to sum 1."""
    grid = np.asarray(p, dtype=np.float64).reshape(1, *src)
    out = T.bilinear_resize(grid, *dst).data.reshape(-1)
    return out / out.sum()


def stage_distributions(maps: Sequence[CorrelationMap], stage_masks: Sequence[np.ndarray],
                        temperature: float = 1.0) -> list[Tensor]:
    return [spatial_softmax(reduce_map(m.values, sm), temperature)
            for m, sm in zip(maps, stage_masks)]


def teacher_distributions(maps: Sequence[CorrelationMap], stage_masks: Sequence[np.ndarray],
                          query_mask: np.ndarray, cfg: DistillConfig = DistillConfig()) -> list[np.ndarray]:
    """Constant teacher for every stage: resized deeper distribution, ground truth for the last."""
    dists = stage_distributions(maps, stage_masks, cfg.temperature)
    teachers = [resize_distribution(dists[l + 1].data, maps[l + 1].query_size, maps[l].query_size)
                for l in range(len(maps) - 1)]
    teachers.append(ground_truth_teacher(query_mask, maps[-1].query_size))
    return teachers


def distill_loss(maps: Sequence[CorrelationMap], stage_masks: Sequence[np.ndarray],
                 query_mask: np.ndarray, cfg: DistillConfig = DistillConfig(),
                 teachers: Sequence[np.ndarray] | None = None) -> tuple[Tensor, list[Tensor]]:
    """Sum of adjacent-stage KL terms plus the ground-truth term on the deepest stage.

    ``stage_masks[l]`` is the binary support mask at stage ``l`` resolution,
    flattened in the same column order as ``maps[l]``.  ``teachers`` pins the
    teacher distributions (as returned by :func:`teacher_distributions`);
    by default they are computed from ``maps`` and detached.  Returns the
    total and the per-pair terms (shallowest first, ground-truth term last).
    """
    if not maps:
        raise ValueError("need at least one correlation map")
    dists = stage_distributions(maps, stage_masks, cfg.temperature)
    if teachers is None:
        teachers = teacher_distributions(maps, stage_masks, query_mask, cfg)
    if len(teachers) != len(maps):
        raise ValueError("need one teacher per stage")
    terms = [kl_pair_loss(t, d) for t, d in zip(teachers, dists)]
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    if cfg.t2_scale:
        total = T.scalar_mul(total, cfg.temperature ** 2)
    return total, terms
