"""Procedural few-shot segmentation benchmark and its metrics.

Every class is a (shape family, hue, texture) triple.  Scenes hold one to a
few objects of distinct classes drawn back to front, so later objects
occlude earlier ones and the per-class masks are mutually exclusive.  All
data is regenerated from seeds; nothing is stored.

Folds interleave class ids (fold ``f`` holds ids ``k`` with ``k % n_folds ==
f``), which spreads each fold's hues evenly around the color wheel.
"""

from __future__ import annotations

import colorsys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FAMILIES = ("disk", "square", "triangle", "ring", "plus", "bar",
            "diamond", "ellipse", "hexagon", "star", "crescent", "frame")
TEXTURES = ("solid", "stripes", "checker", "dots")


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    family: str
    hue: float
    texture: str
    texture_period: float
    texture_angle: float
    size_range: tuple[float, float] = (0.16, 0.3)  # radius as a fraction of the image side


def default_classes(n: int = 12) -> list[ShapeClass]:
    out = []
    for k in range(n):
        out.append(ShapeClass(
            class_id=k,
            family=FAMILIES[k % len(FAMILIES)],
            hue=(k / n) % 1.0,
            texture=TEXTURES[(k // 4) % len(TEXTURES)],
            texture_period=5.0 + (k % 3),
            texture_angle=np.pi * ((k * 7) % 12) / 12,
        ))
    return out


@dataclass(frozen=True)
class FoldSplit:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test classes overlap")


def make_fold_split(fold: int, n_classes: int = 12, n_folds: int = 4) -> FoldSplit:
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold must be in [0, {n_folds})")
    if n_classes % n_folds:
        raise ValueError("classes must divide evenly into folds")
    test = tuple(k for k in range(n_classes) if k % n_folds == fold)
    train = tuple(k for k in range(n_classes) if k % n_folds != fold)
    return FoldSplit(train, test)


# --------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Placement:
    class_id: int
    cy: float
    cx: float
    radius: float
    angle: float
    hue_jitter: float = 0.0
    saturation: float = 0.8
    value: float = 0.75
    phase: float = 0.0


def shape_mask(family: str, H: int, W: int, cy: float, cx: float, radius: float, angle: float
               ) -> np.ndarray:
    """Boolean rasterization of one shape, sampled at pixel centers."""
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    r = np.hypot(u, v)
    if family == "disk":
        return r <= 1.0
    if family == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8
    if family == "triangle":
        s3 = np.sqrt(3.0)
        return (v <= 0.5) & (s3 * u + v + 1 >= 0) & (-s3 * u + v + 1 >= 0)
    if family == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if family == "plus":
        return ((abs(u) <= 0.32) & (abs(v) <= 1.0)) | ((abs(v) <= 0.32) & (abs(u) <= 1.0))
    if family == "bar":
        return (abs(u) <= 1.0) & (abs(v) <= 0.4)
    if family == "diamond":
        return abs(u) + abs(v) <= 1.0
    if family == "ellipse":
        return u ** 2 + (v / 0.6) ** 2 <= 1.0
    if family == "hexagon":
        return np.maximum(abs(u) * np.sqrt(3) / 2 + abs(v) / 2, abs(v)) <= 0.9
    if family == "star":
        theta = np.arctan2(v, u)
        return r <= 0.6 + 0.35 * np.cos(5 * theta)
    if family == "crescent":
        return (r <= 1.0) & ((u - 0.5) ** 2 + v ** 2 > 0.75 ** 2)
    if family == "frame":
        m = np.maximum(abs(u), abs(v))
        return (m <= 0.85) & (m >= 0.45)
    raise ValueError(f"unknown shape family {family!r}")


def texture_field(cls: ShapeClass, H: int, W: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    p = cls.texture_period
    if cls.texture == "solid":
        return np.ones((H, W))
    if cls.texture == "stripes":
        proj = xx * np.cos(cls.texture_angle) + yy * np.sin(cls.texture_angle)
        return 1.0 + 0.3 * np.sign(np.sin(2 * np.pi * proj / p + phase))
    if cls.texture == "checker":
        return 1.0 + 0.3 * np.sign(np.sin(2 * np.pi * xx / p + phase) * np.sin(2 * np.pi * yy / p + phase))
    if cls.texture == "dots":
        off = phase / (2 * np.pi) * p
        fy, fx = (yy + off) % p - p / 2, (xx + off) % p - p / 2
        return np.where(fy ** 2 + fx ** 2 < (p / 3.2) ** 2, 0.6, 1.1)
    raise ValueError(f"unknown texture {cls.texture!r}")


def hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    base = hsv(rng.random(), rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.6))
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    shade = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(-3, 3, size=2)
        shade += 0.04 * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return base[:, None, None] + shade[None]


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    masks: dict[int, np.ndarray]  # class id -> [H, W] uint8, mutually exclusive
    placements: list[Placement]


def render(placements: Sequence[Placement], classes: Sequence[ShapeClass], H: int, W: int,
           rng: np.random.Generator | None = None) -> Scene:
    """Paint placements in order over a background; ``rng`` adds background and pixel noise."""
    by_id = {c.class_id: c for c in classes}
    image = background(rng, H, W) if rng is not None else np.full((3, H, W), 0.45)
    owner = np.full((H, W), -1)
    for pl in placements:
        cls = by_id[pl.class_id]
        region = shape_mask(cls.family, H, W, pl.cy, pl.cx, pl.radius, pl.angle)
        color = hsv(cls.hue + pl.hue_jitter, pl.saturation, pl.value)
        painted = color[:, None, None] * texture_field(cls, H, W, pl.phase)[None]
        image = np.where(region[None], painted, image)
        owner[region] = pl.class_id
    if rng is not None:
        image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    masks = {pl.class_id: (owner == pl.class_id).astype(np.uint8) for pl in placements}
    return Scene(image, masks, list(placements))


def random_placement(rng: np.random.Generator, cls: ShapeClass, H: int, W: int) -> Placement:
    side = min(H, W)
    radius = rng.uniform(*cls.size_range) * side
    margin = 0.6 * radius
    return Placement(
        class_id=cls.class_id,
        cy=rng.uniform(margin, H - margin),
        cx=rng.uniform(margin, W - margin),
        radius=radius,
        angle=rng.uniform(0, 2 * np.pi),
        hue_jitter=rng.uniform(-0.02, 0.02),
        saturation=rng.uniform(0.65, 0.9),
        value=rng.uniform(0.6, 0.9),
        phase=rng.uniform(0, 2 * np.pi),
    )


def generate_scene(class_ids: Sequence[int], seed: int, H: int, W: int,
                   classes: Sequence[ShapeClass] | None = None) -> Scene:
    """Random scene with one object per listed class, drawn in list order."""
    classes = classes if classes is not None else default_classes()
    by_id = {c.class_id: c for c in classes}
    rng = np.random.default_rng(seed)
    placements = [random_placement(rng, by_id[k], H, W) for k in class_ids]
    return render(placements, classes, H, W, rng)


# --------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    query_image: np.ndarray
    query_mask: np.ndarray
    support_images: list[np.ndarray]
    support_masks: list[np.ndarray]
    class_id: int
    seed: int

    @property
    def shots(self) -> int:
        return len(self.support_images)


class SamplingError(RuntimeError):
    pass


def nearest_resize(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize (half-pixel centers), thresholded at > 0."""
    mask = np.asarray(mask)
    H, W = mask.shape
    ys = np.minimum(np.floor((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    xs = np.minimum(np.floor((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return (mask[np.ix_(ys, xs)] > 0).astype(np.float64)


def stage_sizes(H: int, W: int, num_stages: int) -> list[tuple[int, int]]:
    return [(H // 2 ** (l + 1), W // 2 ** (l + 1)) for l in range(1, num_stages + 1)]


def _mask_usable(mask: np.ndarray, sizes: Iterable[tuple[int, int]]) -> bool:
    return bool(mask.any()) and all(nearest_resize(mask, h, w).any() for h, w in sizes)


def sample_episode(class_pool: Sequence[int], shots: int, seed: int, H: int = 64, W: int = 64,
                   classes: Sequence[ShapeClass] | None = None, num_stages: int = 3,
                   min_objects: int = 1, max_objects: int = 4, max_tries: int = 100) -> Episode:
    """Draw a class uniformly from ``class_pool`` and K+1 independent scenes containing it.

    Distractor objects come from the same pool.  A scene is redrawn when the
    episode-class mask is empty at full resolution or, for supports, at any
    stage resolution.
    """
    if not class_pool:
        raise ValueError("empty class pool")
    classes = classes if classes is not None else default_classes()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    pool = list(class_pool)
    cls = int(pool[rng.integers(len(pool))])
    others = [k for k in pool if k != cls]
    sizes = stage_sizes(H, W, num_stages)

    def draw(check_stages: bool):
        for _ in range(max_tries):
            n = int(rng.integers(min_objects, max_objects + 1))
            n = max(1, min(n, len(others) + 1))
            ids = [int(k) for k in rng.permutation(others)[: n - 1]] + [cls]
            ids = [ids[i] for i in rng.permutation(len(ids))]
            scene = generate_scene(ids, int(rng.integers(2**31)), H, W, classes)
            mask = scene.masks[cls]
            if _mask_usable(mask, sizes if check_stages else ()):
                return scene.image, mask
        raise SamplingError(f"no usable scene for class {cls} after {max_tries} draws (seed {seed})")

    qi, qm = draw(check_stages=False)
    supports = [draw(check_stages=True) for _ in range(shots)]
    return Episode(qi, qm, [s[0] for s in supports], [s[1] for s in supports], cls, seed)


@dataclass(frozen=True)
class BenchmarkConfig:
    image_size: int = 64
    n_classes: int = 12
    n_folds: int = 4
    fold: int = 0
    train_episodes: int = 200
    eval_episodes: int = 200
    eval_seed: int = 1234
    min_objects: int = 1
    max_objects: int = 4


@dataclass
class Benchmark:
    cfg: BenchmarkConfig
    num_stages: int = 3
    classes: list[ShapeClass] = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            self.classes = default_classes(self.cfg.n_classes)
        self.split = make_fold_split(self.cfg.fold, self.cfg.n_classes, self.cfg.n_folds)

    def _sample(self, pool, shots, seed) -> Episode:
        c = self.cfg
        return sample_episode(pool, shots, seed, c.image_size, c.image_size, self.classes,
                              self.num_stages, c.min_objects, c.max_objects)

    def train_episode(self, data_seed: int, epoch: int, index: int, shots: int = 1) -> Episode:
        seed = int(np.random.SeedSequence([data_seed, epoch, index, 0x7A1]).generate_state(1)[0])
        return self._sample(self.split.train_ids, shots, seed)

    def eval_episodes(self, shots: int = 1, fold: int | None = None) -> list[Episode]:
        split = self.split if fold is None else make_fold_split(fold, self.cfg.n_classes, self.cfg.n_folds)
        out = []
        for i in range(self.cfg.eval_episodes):
            seed = int(np.random.SeedSequence([self.cfg.eval_seed, i, 0xE7A]).generate_state(1)[0])
            out.append(self._sample(split.test_ids, shots, seed))
        return out


# --------------------------------------------------------------------------
# metrics


@dataclass
class SegCounts:
    """Pooled pixel counts; merging is associative and order-free."""

    inter: dict[int, float] = field(default_factory=dict)
    union: dict[int, float] = field(default_factory=dict)
    episode_ious: dict[int, list[float]] = field(default_factory=dict)
    fg_inter: float = 0.0
    fg_union: float = 0.0
    bg_inter: float = 0.0
    bg_union: float = 0.0

    def add(self, pred: np.ndarray, gt: np.ndarray, class_id: int) -> None:
        p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
        i, u = float(np.sum(p & g)), float(np.sum(p | g))
        self.inter[class_id] = self.inter.get(class_id, 0.0) + i
        self.union[class_id] = self.union.get(class_id, 0.0) + u
        if u > 0:
            self.episode_ious.setdefault(class_id, []).append(i / u)
        self.fg_inter += i
        self.fg_union += u
        self.bg_inter += float(np.sum(~p & ~g))
        self.bg_union += float(np.sum(~p | ~g))

    def merge(self, other: "SegCounts") -> "SegCounts":
        out = SegCounts()
        for src in (self, other):
            for k, v in src.inter.items():
                out.inter[k] = out.inter.get(k, 0.0) + v
            for k, v in src.union.items():
                out.union[k] = out.union.get(k, 0.0) + v
            for k, v in src.episode_ious.items():
                out.episode_ious.setdefault(k, []).extend(v)
        out.fg_inter = self.fg_inter + other.fg_inter
        out.fg_union = self.fg_union + other.fg_union
        out.bg_inter = self.bg_inter + other.bg_inter
        out.bg_union = self.bg_union + other.bg_union
        return out

    def class_iou(self, pooled: bool = True) -> dict[int, float]:
        out = {}
        for k in sorted(self.union):
            if self.union[k] == 0:
                warnings.warn(f"class {k} has zero union over the run; excluded from mIoU")
                continue
            out[k] = self.inter[k] / self.union[k] if pooled else float(np.mean(self.episode_ious[k]))
        return out

    def miou(self, pooled: bool = True) -> float:
        ious = self.class_iou(pooled)
        if not ious:
            raise ValueError("no class with a non-empty union")
        return float(np.mean(list(ious.values())))

    def fb_iou(self) -> float:
        f = self.fg_inter / self.fg_union if self.fg_union else 1.0
        b = self.bg_inter / self.bg_union if self.bg_union else 1.0
        return 0.5 * (f + b)


def accumulate(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray],
               class_ids: Iterable[int] | None = None) -> SegCounts:
    counts = SegCounts()
    preds, gts = list(preds), list(gts)
    ids = list(class_ids) if class_ids is not None else [0] * len(preds)
    for p, g, k in zip(preds, gts, ids):
        counts.add(p, g, k)
    return counts


def miou(preds, gts, class_ids, pooled: bool = True) -> float:
    """Mean over classes of per-class IoU (counts pooled over episodes by default)."""
    return accumulate(preds, gts, class_ids).miou(pooled)


def fb_iou(preds, gts) -> float:
    """Average of foreground and background IoU, class identity ignored."""
    return accumulate(preds, gts).fb_iou()


# --------------------------------------------------------------------------
# optional dump


def dump_episodes(episodes: Sequence[Episode], out_dir: str | Path) -> Path:
    """Write images as PPM, masks as PGM and a manifest TSV; returns the manifest path."""
    from .imageio import write_pgm, write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["episode\tseed\tclass\trole\timage\tmask"]
    for n, ep in enumerate(episodes):
        items = [("query", ep.query_image, ep.query_mask)]
        items += [(f"support{k}", im, m) for k, (im, m) in enumerate(zip(ep.support_images, ep.support_masks))]
        for role, im, m in items:
            img_name, mask_name = f"ep{n:04d}_{role}.ppm", f"ep{n:04d}_{role}_mask.pgm"
            write_ppm(out / img_name, im)
            write_pgm(out / mask_name, (np.asarray(m) > 0).astype(np.uint8) * 255)
            lines.append(f"{n}\t{ep.seed}\t{ep.class_id}\t{role}\t{img_name}\t{mask_name}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
