"""Acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line and then asserts; the
lines are repeated together at the end of the pytest run.  Training-based criteria share one cache of runs so
the baseline for every seed is trained once.  Expect about 35 minutes on one
CPU core.
"""

import math
import time
from functools import lru_cache

import numpy as np
import pytest

from corrseg import tensor as T
from corrseg.cli import main
from corrseg.decoder import align_coarse, fuse_stage, init_decoder
from corrseg.distill import distill_loss, kl_pair_loss, reduce_map, spatial_softmax
from corrseg.episodes import Benchmark, BenchmarkConfig, Episode
from corrseg.gradsuite import group_summary, run_suite
from corrseg.matching import CorrelationMap, correlation, inverse_softmax
from corrseg.model import (TrainConfig, checkpoint_bytes, evaluate, forward, init_params,
                           kshot_concat, load_checkpoint, parse_checkpoint, train)
from corrseg.pyramid import scoped
from corrseg.tensor import NumericalError, Tensor

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
# Budget for the multi-seed directional comparisons; the learning check uses
# the full default configuration.
DIRECTIONAL_EPOCHS = 8
VARIANTS = {
    "default": {},
    "no_distill": {"use_distill": False},
    "cross_attention": {"matching": "cross_attention"},
    "no_support_mask": {"support_mask_ablation": True},
}


LINES = {}


def report(n, ok, detail):
    LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print("\n" + LINES[n])
    assert ok, f"criterion {n}: {detail}"


@lru_cache(maxsize=None)
def bench():
    return Benchmark(BenchmarkConfig(), 3)


@lru_cache(maxsize=None)
def heldout(shots=1):
    return tuple(bench().eval_episodes(shots))


DIVERGED = set()


@lru_cache(maxsize=None)
def directional_miou(variant, seed):
    cfg = TrainConfig(epochs=DIRECTIONAL_EPOCHS, seed=seed, **VARIANTS[variant])
    try:
        # per-epoch logging on a small slice; the score below uses every held-out episode
        result = train(bench(), cfg, eval_episodes=heldout()[:10])
    except NumericalError:
        # non-finite parameters predict background everywhere, which scores 0
        DIVERGED.add((variant, seed))
        return 0.0
    return evaluate(result.params, cfg, heldout()).miou()


@lru_cache(maxsize=None)
def default_run(shots=1):
    cfg = TrainConfig(shots=shots)
    t0 = time.perf_counter()
    result = train(bench(), cfg, eval_episodes=heldout(shots)[:10])
    seconds = time.perf_counter() - t0
    return cfg, result.params, seconds


def paired(a, b):
    deltas = [directional_miou(a, s) - directional_miou(b, s) for s in SEEDS]
    per_seed = " ".join(f"{s}:{d:+.4f}" + ("(diverged)" if {(a, s), (b, s)} & DIVERGED else "")
                        for s, d in zip(SEEDS, deltas))
    return float(np.mean(deltas)), per_seed


# --------------------------------------------------------------------------
# oracles shared by criteria 2 to 4


def loop_correlation(q, k, t):
    n, m = q.shape[0], k.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            dot = sum(q[i, a] * k[j, a] for a in range(q.shape[1]))
            nq = math.sqrt(sum(x * x for x in q[i]))
            nk = math.sqrt(sum(x * x for x in k[j]))
            out[i, j] = dot / (nq * nk * t)
    return out


def loop_inverse_softmax(c):
    out = np.zeros_like(c)
    for j in range(c.shape[1]):
        top = max(c[:, j])
        col = [math.exp(c[i, j] - top) for i in range(c.shape[0])]
        for i in range(c.shape[0]):
            out[i, j] = col[i] / sum(col)
    return out


def loop_masked_mean(c, mask):
    return np.array([sum(c[i, j] for j in range(c.shape[1]) if mask[j]) / sum(mask > 0)
                     for i in range(c.shape[0])])


def loop_kl(p, q):
    return sum(p[i] * math.log(p[i] / q[i]) for i in range(len(p)) if p[i] > 0)


def random_case(rng):
    n, m, c = rng.integers(1, 65), rng.integers(1, 65), rng.integers(1, 9)
    fq, fs = rng.normal(size=(n, c)), rng.normal(size=(m, c))
    wq, wk = rng.normal(size=(c, c)), rng.normal(size=(c, c))
    return fq, fs, wq, wk


# --------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(h=1e-5, tol=1e-4)
    seconds = time.perf_counter() - t0
    worst = max(r.report.max_rel_error for r in results)
    failed = [f"{r.group}/{r.name}" for r in results if not r.report.passed]
    groups = group_summary(results)
    ok = not failed and worst < 1e-4 and seconds < 120
    report(1, ok, f"{len(results)} cases in {len(groups)} groups, max rel err {worst:.2e}, "
                  f"{seconds:.1f}s, failed={failed}")


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(10):
        fq, fs, wq, wk = random_case(rng)
        c = correlation(Tensor(fq), Tensor(fs), Tensor(wq), Tensor(wk), 0.1).data
        worst = max(worst, np.abs(c - loop_correlation(fq @ wq.T, fs @ wk.T, 0.1)).max())
        worst = max(worst, np.abs(inverse_softmax(Tensor(c)).data - loop_inverse_softmax(c)).max())
        mask = rng.random(c.shape[1]) > 0.5
        mask[rng.integers(c.shape[1])] = True
        worst = max(worst, np.abs(reduce_map(Tensor(c), mask.astype(float)).data
                                  - loop_masked_mean(c, mask)).max())
        p, q = rng.dirichlet(np.ones(c.shape[0])), rng.dirichlet(np.ones(c.shape[0]))
        worst = max(worst, abs(float(kl_pair_loss(p, Tensor(q)).data) - loop_kl(p, q)))
    report(2, worst <= 1e-10, f"max abs deviation from loop oracles {worst:.2e}")


def test_criterion_3_invariants():
    rng = np.random.default_rng(30)
    col_err = dist_err = bound_excess = scale_err = 0.0
    min_loss = np.inf
    for _ in range(25):
        fq, fs, wq, wk = random_case(rng)
        c = correlation(Tensor(fq), Tensor(fs), Tensor(wq), Tensor(wk), 0.1)
        col_err = max(col_err, np.abs(inverse_softmax(c).data.sum(axis=0) - 1).max())
        mask = np.zeros(c.shape[1])
        mask[: rng.integers(1, c.shape[1] + 1)] = 1
        d = spatial_softmax(reduce_map(c, mask), rng.uniform(0.2, 5.0)).data
        dist_err = max(dist_err, abs(d.sum() - 1))
        bound_excess = max(bound_excess, np.abs(c.data).max() - 10.0)
        scaled = fq * rng.uniform(0.01, 100.0, size=(fq.shape[0], 1))
        c2 = correlation(Tensor(scaled), Tensor(fs), Tensor(wq), Tensor(wk), 0.1).data
        scale_err = max(scale_err, np.abs(c2 - c.data).max())
    for _ in range(20):
        s = int(rng.choice([2, 4]))
        scale = rng.uniform(0.1, 20)
        maps = [CorrelationMap(Tensor(rng.normal(size=(4 * s * s, 6)) * scale), 1, (2 * s, 2 * s), (2, 3)),
                CorrelationMap(Tensor(rng.normal(size=(s * s, 6)) * scale), 2, (s, s), (2, 3))]
        masks = [(rng.random(6) > 0.5).astype(float) for _ in maps]
        for m in masks:
            m[0] = 1
        qm = (rng.random((4 * s, 4 * s)) > 0.7).astype(float)
        qm[-1, -1] = 1
        total, _ = distill_loss(maps, masks, qm)
        min_loss = min(min_loss, float(total.data))
    for _ in range(20):
        p = rng.dirichlet(np.ones(16) * rng.uniform(0.05, 2))
        q = spatial_softmax(Tensor(rng.normal(size=16) * rng.uniform(0.1, 20)))
        min_loss = min(min_loss, float(kl_pair_loss(p, q).data))
    ok = col_err <= 1e-12 and dist_err <= 1e-12 and bound_excess <= 1e-12 \
        and scale_err < 1e-10 and min_loss >= -1e-12
    report(3, ok, f"column sum err {col_err:.1e}, distribution sum err {dist_err:.1e}, "
                  f"|C| excess over 1/t {bound_excess:.1e}, min loss {min_loss:.1e}, "
                  f"row-scale change {scale_err:.1e}")


def test_criterion_4_closed_form_kl():
    rng = np.random.default_rng(40)
    self_err = uniform_err = 0.0
    for n in (1, 2, 5, 16, 64, 256):
        p = spatial_softmax(Tensor(rng.normal(size=n)))
        self_err = max(self_err, abs(float(kl_pair_loss(p.data, p).data)))
        onehot = np.zeros(n)
        onehot[rng.integers(n)] = 1
        uniform = spatial_softmax(Tensor(np.full(n, rng.normal())))
        uniform_err = max(uniform_err, abs(float(kl_pair_loss(onehot, uniform).data) - math.log(n)))
    ok = self_err <= 1e-12 and uniform_err <= 1e-9
    report(4, ok, f"|KL(p||p)| {self_err:.1e}, |KL(onehot||uniform) - log N| {uniform_err:.1e}")


def test_criterion_5_decoder_identity():
    rng = np.random.default_rng(50)
    mismatches = 0
    trials = 0
    for norm in (False, True):
        p = init_decoder(rng, (4, 6, 8), norm)
        p = {k: Tensor(np.zeros_like(v) if ".mlp." in k else v) for k, v in p.items()}
        for _ in range(10):
            h = int(rng.integers(1, 6))
            sp = scoped(p, "dec1.")
            x = Tensor(rng.normal(size=(4, 2 * h, 2 * h)))
            coarse = Tensor(rng.normal(size=(6, h, h)))
            out = fuse_stage(x, coarse, sp)
            mismatches += not np.array_equal(out.data, align_coarse(coarse, sp, (2 * h, 2 * h)).data)
            trials += 1
    report(5, mismatches == 0, f"{trials - mismatches}/{trials} zeroed-MLP fusions bit-identical to passthrough")


def test_criterion_6_learning_check():
    cfg, params, seconds = default_run()
    trained = evaluate(params, cfg, heldout()).miou()
    untrained = evaluate(init_params(cfg), cfg, heldout()).miou()
    ok = trained >= 0.60 and seconds <= 600
    report(6, ok, f"held-out mIoU {trained:.4f} after {cfg.epochs} epochs in {seconds:.0f}s "
                  f"(untrained {untrained:.4f})")


def test_criterion_7_distillation_direction():
    delta, per_seed = paired("default", "no_distill")
    report(7, delta >= 0, f"mean delta (distill - no distill) {delta:+.4f}; per seed {per_seed}")


def test_criterion_8_inverse_softmax_direction():
    delta, per_seed = paired("default", "cross_attention")
    report(8, delta >= 0, f"mean delta (Cos+Inv-SM - CA) {delta:+.4f}; per seed {per_seed}")


def test_criterion_9_kshot_consistency():
    # Each setting is trained on its own episodes and scored on the same held-out
    # queries; the 1-shot checkpoint scored at K=5 is reported alongside.
    cfg1, params1, _ = default_run(1)
    cfg5, params5, _ = default_run(5)
    one = evaluate(params1, cfg1, heldout(1)).miou()
    five = evaluate(params5, cfg5, heldout(5)).miou()
    cross = evaluate(params1, cfg1, heldout(5)).miou()

    identical = True
    for ep in heldout(1)[:5]:
        f, m = kshot_concat([Tensor(ep.support_images[0])], [ep.support_masks[0]])
        again = Episode(ep.query_image, ep.query_mask, [f.data], [m], ep.class_id, ep.seed)
        identical &= np.array_equal(forward(ep, params1, cfg1).logits.data,
                                    forward(again, params1, cfg1).logits.data)
    ok = five >= one - 0.02 and identical
    report(9, ok, f"5-shot {five:.4f} vs 1-shot {one:.4f}; 1-shot checkpoint at K=5 {cross:.4f}; "
                  f"K=1 bit-identical={identical}")


def test_criterion_10_support_mask_ablation():
    delta, per_seed = paired("default", "no_support_mask")
    report(10, delta >= 0.05, f"mean drop without support mask {delta:+.4f}; per seed {per_seed}")


def test_criterion_11_reproducibility(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("epochs = 2\ntrain_episodes = 40\neval_episodes = 20\nseed = 7\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["train", "--config", str(cfg_file), "--out", str(o)]) for o in outs]
    same_csv = (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    raw = (outs[0] / "model.ckpt").read_bytes()
    same_ckpt = raw == (outs[1] / "model.ckpt").read_bytes()
    round_trip = checkpoint_bytes(parse_checkpoint(raw)) == raw
    loaded = load_checkpoint(outs[0] / "model.ckpt")
    round_trip &= checkpoint_bytes(loaded) == raw
    ok = codes == [0, 0] and same_csv and same_ckpt and round_trip
    report(11, ok, f"metrics identical={same_csv}, checkpoint identical={same_ckpt}, "
                   f"round trip exact={round_trip}")
