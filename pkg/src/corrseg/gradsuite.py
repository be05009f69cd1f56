"""Finite-difference gradient suite over every differentiable operation, on miniature shapes."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .decoder import fuse_stage, init_decoder, predict_mask
from .distill import distill_loss, teacher_distributions
from .episodes import sample_episode
from .matching import CorrelationMap, cross_attention_match, init_matching, match
from .pyramid import build_pyramid, downsample, init_stage, self_attention_block
from .tensor import GradCheckReport, Tensor, grad_check


@dataclass
class Case:
    group: str
    name: str
    fn: Callable[[list[Tensor]], Tensor]
    params: list[np.ndarray]
    names: list[str] | None = None


@dataclass
class CaseResult:
    group: str
    name: str
    report: GradCheckReport


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(name.encode()))


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, w))


def _tensor_cases() -> list[Case]:
    r = _rng("tensor")
    w34, w32, w36, w35 = (r.normal(size=s) for s in [(3, 4), (3, 2), (3, 6), (3, 5)])
    w257, w223 = r.normal(size=(2, 5, 7)), r.normal(size=(2, 2, 3))
    ops = [
        ("elementwise", "add_sub_mul", lambda p: T.sum(T.mul(T.sub(T.add(p[0], p[1]), p[1] * 0.3), p[0])), [(3, 4), (3, 4)]),
        ("elementwise", "broadcast_add", lambda p: _weighted(T.add(p[0], p[1]), w34), [(3, 4), (4,)]),
        ("elementwise", "div", lambda p: T.sum(T.div(p[0], T.exp(p[1]))), [(3, 4), (3, 1)]),
        ("elementwise", "relu", lambda p: _weighted(T.relu(p[0]), w34), [(3, 4)]),
        ("elementwise", "exp_log", lambda p: _weighted(T.log(T.exp(T.scalar_mul(p[0], 0.5)) + 1.0), w34), [(3, 4)]),
        ("elementwise", "clip_min", lambda p: _weighted(T.clip_min(T.exp(p[0]), 1e-3), w34), [(3, 4)]),
        ("reduction", "sum_mean", lambda p: T.sum(T.mean(T.mul(p[0], p[0]), axis=1)), [(3, 4)]),
        ("matmul", "matmul", lambda p: _weighted(T.matmul(p[0], p[1]), w32), [(3, 4), (4, 2)]),
        ("softmax", "softmax_axis0", lambda p: _weighted(T.softmax(p[0], axis=0), w34), [(3, 4)]),
        ("softmax", "softmax_axis1", lambda p: _weighted(T.softmax(p[0], axis=1), w34), [(3, 4)]),
        ("softmax", "log_softmax", lambda p: _weighted(T.log_softmax(p[0], axis=1), w34), [(3, 4)]),
        ("normalization", "normalize_rows", lambda p: _weighted(T.normalize_rows(p[0]), w34), [(3, 4)]),
        ("normalization", "layer_norm", lambda p: _weighted(T.layer_norm(p[0], p[1], p[2]), w34), [(3, 4), (4,), (4,)]),
        ("resize", "bilinear_up", lambda p: _weighted(T.bilinear_resize(p[0], 5, 7), w257), [(2, 3, 4)]),
        ("resize", "bilinear_down", lambda p: _weighted(T.bilinear_resize(p[0], 2, 3), w223), [(2, 4, 6)]),
        ("resize", "avg_pool2x2", lambda p: _weighted(T.avg_pool2x2(p[0]), w223), [(2, 4, 6)]),
        ("indexing", "concat", lambda p: _weighted(T.concat([p[0], p[1]], axis=1), w36), [(3, 4), (3, 2)]),
        ("indexing", "reshape_transpose", lambda p: _weighted(T.transpose(T.reshape(p[0], (4, 3))), w34), [(3, 4)]),
        ("indexing", "take_scatter", lambda p: _weighted(T.scatter(T.take(p[0], [2, 0], 1), [1, 3], 5, 1), w35), [(3, 4)]),
    ]
    out = []
    for group, name, fn, shapes in ops:
        rng = _rng(name)
        out.append(Case(f"tensor.{group}", name, fn, [rng.normal(size=s) for s in shapes]))
    return out


def _module_cases() -> list[Case]:
    cases = []

    r = _rng("pyramid.block")
    stage = init_stage(r, 3, 4)
    keys = sorted(stage)
    wb, wd = r.normal(size=(3, 2, 2)), r.normal(size=(4, 1, 1))
    cases.append(Case("pyramid", "self_attention_block",
                      lambda p: _weighted(self_attention_block(p[0], dict(zip(keys, p[1:]))), wb),
                      [r.normal(size=(3, 2, 2))] + [stage[k] for k in keys], ["F"] + keys))
    cases.append(Case("pyramid", "downsample",
                      lambda p: _weighted(downsample(p[0], {"expand.w": p[1], "expand.b": p[2]}), wd),
                      [r.normal(size=(3, 2, 2)), stage["expand.w"], stage["expand.b"]]))
    r = _rng("pyramid.build")
    pyr = {}
    for l, (c, nxt) in enumerate([(2, 3), (3, None)], start=1):
        for k, v in init_stage(r, c, nxt).items():
            pyr[f"pyr{l}.{k}"] = v
    pkeys = list(pyr)
    wp = [r.normal(size=(2, 2, 2)), r.normal(size=(3, 1, 1))]
    cases.append(Case("pyramid", "build_pyramid",
                      lambda p: T.add(*[_weighted(s, w) for s, w in
                                        zip(build_pyramid(p[0], dict(zip(pkeys, p[1:])), 2), wp)]),
                      [r.normal(size=(2, 2, 2))] + [pyr[k] for k in pkeys], ["F"] + pkeys))

    r = _rng("matching")
    mw = init_matching(r, 3)
    mkeys = ["wq", "wk", "wv", "wo"]
    ms = np.array([[1.0, 0.0], [1.0, 1.0]])
    prior = r.uniform(size=(2, 2))
    wm = r.normal(size=(3, 2, 2))
    feats = [r.normal(size=(3, 2, 2)), r.normal(size=(3, 2, 2))]
    for norm in ("inverse_softmax", "softmax", "none"):
        cases.append(Case("matching.correlation", norm,
                          lambda p, norm=norm: _weighted(match(p[0], p[1], ms, prior, dict(zip(mkeys, p[2:])),
                                                               0.5, norm)[0], wm),
                          feats + [mw[k] for k in mkeys], ["Fq", "Fs"] + mkeys))
    cases.append(Case("matching.cross_attention", "cross_attention",
                      lambda p: _weighted(cross_attention_match(p[0], p[1], ms, prior, dict(zip(mkeys, p[2:])))[0], wm),
                      feats + [mw[k] for k in mkeys], ["Fq", "Fs"] + mkeys))

    r = _rng("distill")
    c1, c2 = r.normal(size=(16, 4)), r.normal(size=(4, 4))
    m1, m2 = np.array([1.0, 0, 1, 1]), np.array([1.0, 1, 0, 1])
    qm = (r.uniform(size=(8, 8)) > 0.5).astype(float)
    qm[0, 0] = 1

    def maps_of(a, b):
        return [CorrelationMap(a, 1, (4, 4), (2, 2)), CorrelationMap(b, 2, (2, 2), (2, 2))]

    frozen = teacher_distributions(maps_of(Tensor(c1), Tensor(c2)), [m1, m2], qm)
    cases.append(Case("distill", "distill_loss",
                      lambda p: distill_loss(maps_of(p[0], p[1]), [m1, m2], qm, teachers=frozen)[0], [c1, c2]))

    r = _rng("decoder")
    dp = {k[5:]: v for k, v in init_decoder(r, (3, 4), norm=True).items() if k.startswith("dec1.")}
    dkeys = sorted(dp)
    wdec = r.normal(size=(3, 4, 4))
    cases.append(Case("decoder", "fuse_stage",
                      lambda p: _weighted(fuse_stage(p[0], p[1], dict(zip(dkeys, p[2:]))), wdec),
                      [r.normal(size=(3, 4, 4)), r.normal(size=(4, 2, 2))] + [dp[k] for k in dkeys],
                      ["x", "coarse"] + dkeys))
    head = init_decoder(r, (3,))
    wh = r.normal(size=(2, 8, 8))
    cases.append(Case("decoder", "predict_mask",
                      lambda p: _weighted(predict_mask(p[0], {"head.w": p[1], "head.b": p[2]}, 8, 8), wh),
                      [r.normal(size=(3, 4, 4)), head["head.w"], r.normal(size=2)]))
    return cases


def _end_to_end_cases() -> list[Case]:
    from .model import TrainConfig, forward, init_params, loss

    out = []
    episode = sample_episode((0, 1, 2), 1, seed=4, H=16, W=16, num_stages=2)
    for name, cfg in [("correlation", TrainConfig(num_stages=2, channels=(3, 4), seed=3)),
                      ("cross_attention", TrainConfig(num_stages=2, channels=(3, 4), seed=1,
                                                      matching="cross_attention"))]:
        params = init_params(cfg)
        names = params.names()
        res = forward(episode, params, cfg)
        teachers = teacher_distributions(res.maps, res.stage_masks, episode.query_mask, cfg.distill)

        def fn(p, cfg=cfg, names=names, teachers=teachers):
            return loss(forward(episode, dict(zip(names, p)), cfg), episode, cfg, teachers).total

        out.append(Case("model.loss", name, fn, [params.arrays[n] for n in names], names))
    return out


def _sign_bug_case() -> Case:
    def bad_square(a):
        return T._make(a.data * a.data, (a,), lambda g: (-2 * g * a.data,), "bad_square")

    return Case("injected", "sign_bug", lambda p: T.sum(bad_square(p[0])), [np.linspace(0.5, 1.5, 4)])


def all_cases(include_model: bool = True, inject_sign_bug: bool = False) -> list[Case]:
    cases = _tensor_cases() + _module_cases()
    if include_model:
        cases += _end_to_end_cases()
    if inject_sign_bug:
        cases.append(_sign_bug_case())
    return cases


def run_suite(h: float = 1e-5, tol: float = 1e-4, include_model: bool = True,
              inject_sign_bug: bool = False) -> list[CaseResult]:
    return [CaseResult(c.group, c.name, grad_check(c.fn, c.params, h=h, tol=tol, names=c.names))
            for c in all_cases(include_model, inject_sign_bug)]


def group_summary(results: list[CaseResult]) -> dict[str, float]:
    """Max relative error per group."""
    out: dict[str, float] = {}
    for r in results:
        out[r.group] = max(out.get(r.group, 0.0), r.report.max_rel_error)
    return out
