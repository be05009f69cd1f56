"""Full few-shot segmentation model: assembly, objective, training and checkpoints."""

from __future__ import annotations

import functools
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .decoder import decode, hard_mask, init_decoder, predict_mask
from .distill import DistillConfig, distill_loss
from .episodes import Benchmark, Episode, SegCounts, nearest_resize
from .matching import (NORMALIZATIONS, CorrelationMap, cross_attention_match, init_matching, match,
                       prior_mask)
from .pyramid import EncoderParams, build_pyramid, encode, init_stage, make_encoder, scoped
from .tensor import GradTape, NumericalError, ShapeError, Tensor

log = logging.getLogger(__name__)

MATCHING_VARIANTS = ("correlation", "cross_attention")


@dataclass(frozen=True)
class TrainConfig:
    num_stages: int = 3
    channels: tuple[int, ...] = (16, 24, 32)
    t: float = 0.1
    distill_temperature: float = 1.0
    distill_t2_scale: bool = False
    lambda_distill: float = 1.0
    use_distill: bool = True
    use_prior: bool = True
    matching: str = "correlation"
    normalization: str = "inverse_softmax"
    support_mask_ablation: bool = False
    decoder_norm: bool = False
    optimizer: str = "sgd"
    lr: float = 0.05
    epochs: int = 40
    batch_size: int = 1
    shots: int = 1
    seed: int = 0
    encoder_seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.matching not in MATCHING_VARIANTS:
            raise ValueError(f"matching must be one of {MATCHING_VARIANTS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if self.t <= 0 or self.distill_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.batch_size < 1 or self.shots < 1:
            raise ValueError("batch_size and shots must be >= 1")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        """Channels for exactly ``num_stages`` stages; extended linearly when too short."""
        ch = list(self.channels)
        step = ch[-1] - ch[-2] if len(ch) > 1 else 8
        while len(ch) < self.num_stages:
            ch.append(ch[-1] + step)
        return tuple(ch[: self.num_stages])

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.distill_temperature, self.distill_t2_scale)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Named learnable arrays in a fixed enumeration order."""

    arrays: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False, dtype=np.float64) -> dict[str, Tensor]:
        return {k: Tensor(v.astype(dtype, copy=False), requires_grad=requires_grad)
                for k, v in self.arrays.items()}


def init_params(cfg: TrainConfig) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1A17]))
    ch = cfg.stage_channels
    arrays: dict[str, np.ndarray] = {}
    for l, c in enumerate(ch, start=1):
        nxt = ch[l] if l < len(ch) else None
        for k, v in init_stage(rng, c, nxt).items():
            arrays[f"pyr{l}.{k}"] = v
    for l, c in enumerate(ch, start=1):
        for k, v in init_matching(rng, c).items():
            arrays[f"match{l}.{k}"] = v
    arrays.update(init_decoder(rng, ch, norm=cfg.decoder_norm))
    return ModelParams(arrays)


@functools.lru_cache(maxsize=8)
def encoder_for(seed: int, channels: int) -> EncoderParams:
    return make_encoder(seed, channels)


# --------------------------------------------------------------------------
# forward


def kshot_concat(features: Sequence[Tensor], masks: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """Join K support maps along the width axis so the support token set grows K-fold."""
    if not features or len(features) != len(masks):
        raise ValueError("need matching, non-empty lists of support features and masks")
    if len(features) == 1:
        return features[0], masks[0]
    shape = features[0].shape
    for f, m in zip(features, masks):
        if f.shape != shape or np.shape(m) != shape[1:]:
            raise ShapeError("support shots must share feature and mask shapes")
    return T.concat(features, axis=2), np.concatenate(masks, axis=1)


@dataclass
class ForwardResult:
    logits: Tensor  # [2, H, W]
    maps: list[CorrelationMap]
    stage_masks: list[np.ndarray]  # flattened support masks per stage, map column order
    prior: np.ndarray
    query_pyramid: list[Tensor]


def forward(episode: Episode, params: Mapping[str, Tensor] | ModelParams, cfg: TrainConfig
            ) -> ForwardResult:
    if isinstance(params, ModelParams):
        params = params.tensors(dtype=np.dtype(cfg.precision))
    L = cfg.num_stages
    ch = cfg.stage_channels
    enc = encoder_for(cfg.encoder_seed, ch[0])
    _, H, W = np.shape(episode.query_image)
    fq0 = encode(episode.query_image, enc, L)
    fs0 = [encode(img, enc, L) for img in episode.support_images]
    masks = [np.ones_like(m, dtype=np.float64) if cfg.support_mask_ablation else np.asarray(m)
             for m in episode.support_masks]
    for m in masks:
        if not np.any(m):
            raise ValueError("empty support mask")
    if not np.any(episode.query_mask):
        raise ValueError("empty query mask")

    hb, wb = fq0.shape[1:]
    if cfg.use_prior:
        fs_cat, ms_cat = kshot_concat(fs0, [nearest_resize(m, hb, wb) for m in masks])
        prior = prior_mask(fq0, np.asarray(getattr(fs_cat, "data", fs_cat)), ms_cat)
    else:
        prior = np.zeros((hb, wb))

    dtype = np.dtype(cfg.precision)
    pyr_q = build_pyramid(Tensor(fq0, dtype=dtype), params, L)
    pyr_s = [build_pyramid(Tensor(f, dtype=dtype), params, L) for f in fs0]

    outputs, maps, stage_masks = [], [], []
    for l in range(L):
        size = pyr_q[l].shape[1:]
        ssize = pyr_s[0][l].shape[1:]
        sm = [nearest_resize(m, *ssize) for m in masks]
        fs_l, ms_l = kshot_concat([s[l] for s in pyr_s], sm)
        prior_l = T.bilinear_resize(prior[None], *size).data[0]
        p = scoped(params, f"match{l + 1}.")
        if cfg.matching == "correlation":
            x, cmap = match(pyr_q[l], fs_l, ms_l, prior_l, p, cfg.t, cfg.normalization, stage=l + 1)
        else:
            x, cmap = cross_attention_match(pyr_q[l], fs_l, ms_l, prior_l, p, stage=l + 1)
        outputs.append(x)
        maps.append(cmap)
        stage_masks.append(ms_l.reshape(-1))
    logits = predict_mask(decode(outputs, params), params, H, W)
    return ForwardResult(logits, maps, stage_masks, prior, pyr_q)


@dataclass
class LossParts:
    total: Tensor
    ce: float
    kl: float


def cross_entropy(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Pixel-mean two-class cross-entropy; ``mask`` is 1 for foreground."""
    fg = (np.asarray(mask) > 0).astype(np.float64)
    onehot = np.stack([1.0 - fg, fg])
    n = fg.size
    return T.scalar_mul(T.sum(T.mul(T.log_softmax(logits, axis=0), onehot)), -1.0 / n)


def loss(result: ForwardResult, episode: Episode, cfg: TrainConfig,
         teachers: Sequence[np.ndarray] | None = None) -> LossParts:
    """Cross-entropy plus ``lambda_distill`` times the correlation distillation loss.

    ``teachers`` pins the distillation targets; gradient checks need this
    because the default teachers depend on the parameters but are detached.
    """
    ce = cross_entropy(result.logits, episode.query_mask)
    if not cfg.use_distill:
        return LossParts(ce, float(ce.data), 0.0)
    kl, _ = distill_loss(result.maps, result.stage_masks, episode.query_mask, cfg.distill, teachers)
    if cfg.lambda_distill == 0:
        return LossParts(ce, float(ce.data), float(kl.data))
    total = T.add(ce, T.scalar_mul(kl, cfg.lambda_distill))
    return LossParts(total, float(ce.data), float(kl.data))


def loss_and_grads(episode: Episode, params: ModelParams, cfg: TrainConfig
                   ) -> tuple[LossParts, dict[str, np.ndarray]]:
    leaves = params.tensors(requires_grad=True, dtype=np.dtype(cfg.precision))
    with GradTape() as tape:
        parts = loss(forward(episode, leaves, cfg), episode, cfg)
    names = list(leaves)
    grads = tape.gradient(parts.total, [leaves[k] for k in names])
    return parts, dict(zip(names, grads))


# --------------------------------------------------------------------------
# optimization


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        for k, g in grads.items():
            params.arrays[k] -= self.lr * g


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            params.arrays[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return SGD(cfg.lr) if cfg.optimizer == "sgd" else Adam(cfg.lr)


def predict(episode: Episode, params: ModelParams | Mapping[str, Tensor], cfg: TrainConfig) -> np.ndarray:
    return hard_mask(forward(episode, params, cfg).logits)


def evaluate(params: ModelParams, cfg: TrainConfig, episodes: Sequence[Episode]) -> SegCounts:
    tensors = params.tensors(dtype=np.dtype(cfg.precision))
    counts = SegCounts()
    for ep in episodes:
        counts.add(predict(ep, tensors, cfg), ep.query_mask, ep.class_id)
    return counts


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    ce: float
    kl: float
    heldout_miou: float
    fbiou: float


METRICS_HEADER = ("epoch", "train_loss", "ce", "kl", "heldout_miou", "fbiou")


def format_metrics_row(row: EpochLog) -> str:
    return ",".join([str(row.epoch)] + [repr(float(getattr(row, k))) for k in METRICS_HEADER[1:]])


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog] = field(default_factory=list)


def train(bench: Benchmark, cfg: TrainConfig, params: ModelParams | None = None,
          eval_episodes: Sequence[Episode] | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Episode-wise training; one held-out evaluation per epoch.

    Raises :class:`NumericalError` on a non-finite loss or gradient.
    """
    if set(bench.split.train_ids) & set(bench.split.test_ids):
        raise ValueError("train and test classes overlap")
    params = params.copy() if params is not None else init_params(cfg)
    opt = make_optimizer(cfg)
    if eval_episodes is None:
        eval_episodes = bench.eval_episodes(cfg.shots)
    result = TrainResult(params)
    n = bench.cfg.train_episodes
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        tot = ce = kl = 0.0
        acc: dict[str, np.ndarray] = {}
        for i in range(n):
            ep = bench.train_episode(cfg.seed, epoch, i, cfg.shots)
            parts, grads = loss_and_grads(ep, params, cfg)
            if not np.isfinite(float(parts.total.data)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, episode {i}")
            tot, ce, kl = tot + float(parts.total.data), ce + parts.ce, kl + parts.kl
            for k, g in grads.items():
                acc[k] = acc[k] + g if k in acc else g
            if (i + 1) % cfg.batch_size == 0 or i == n - 1:
                count = (i % cfg.batch_size) + 1
                opt.step(params, {k: g / count for k, g in acc.items()})
                acc = {}
        counts = evaluate(params, cfg, eval_episodes)
        row = EpochLog(epoch, tot / n, ce / n, kl / n, counts.miou(), counts.fb_iou())
        result.log.append(row)
        log.info("epoch %d loss %.4f ce %.4f kl %.4f miou %.4f fbiou %.4f (%.1fs)", epoch,
                 row.train_loss, row.ce, row.kl, row.heldout_miou, row.fbiou, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
    return result


# --------------------------------------------------------------------------
# cost accounting


def count_macs(cfg: TrainConfig, image_size: int = 64) -> int:
    """Analytic multiply-accumulate count of one 1-shot forward pass (encoder excluded)."""
    ch = cfg.stage_channels
    macs = 0
    side = image_size // 4
    for l, c in enumerate(ch):
        n = (side >> l) ** 2
        block = n * c * c * 4 + 2 * n * n * c + n * c * 2 * c * 2  # projections, attention, MLP
        macs += 2 * block  # query and support pyramids
        if l + 1 < len(ch):
            macs += 2 * (n // 4) * c * ch[l + 1]
        corr = n * c * c * 3 + n * n * c * 2 + n * (c + 1) * c  # projections, scores, retrieval, W^o
        macs += corr
        dec = n * c * 2 * c * 2 + (n * ch[l + 1] * c if l + 1 < len(ch) else 0)
        macs += dec
    macs += (side ** 2) * ch[0] * 2
    return int(macs)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"CSEGCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def checkpoint_bytes(params: ModelParams) -> bytes:
    """Magic, version, count, then per parameter: name, shape, little-endian float64 data."""
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.arrays))]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes) -> ModelParams:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last parameter")
    return ModelParams(arrays)


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None) -> ModelParams:
    """Read a checkpoint; with ``cfg``, names and shapes must match that architecture."""
    params = parse_checkpoint(Path(path).read_bytes())
    if cfg is not None:
        expected = init_params(cfg).arrays
        if list(expected) != list(params.arrays):
            missing = sorted(set(expected) - set(params.arrays))
            extra = sorted(set(params.arrays) - set(expected))
            raise ShapeMismatchError(f"parameter names differ (missing {missing[:4]}, extra {extra[:4]})")
        for k, v in expected.items():
            if v.shape != params.arrays[k].shape:
                raise ShapeMismatchError(f"{k}: checkpoint {params.arrays[k].shape}, config {v.shape}")
    return params


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
