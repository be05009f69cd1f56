"""Command-line front end: train, eval, ablate, gradcheck, heatmaps, dump-episodes.

Every command takes ``--config FILE`` plus ``--key value`` overrides for any
config key, writes its effective configuration next to its outputs, and
exits 0 on success, 1 on usage/config errors and 2 on numerical failure.
The output directory is ``--out DIR``; without it, ``$CORRSEG_OUT/<command>``
(or ``./runs/<command>``) is used.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as C
from .distill import reduce_map, spatial_softmax
from .episodes import Benchmark, SegCounts, dump_episodes, sample_episode
from .imageio import minmax_gray, write_pgm, write_ppm
from .model import (METRICS_HEADER, CheckpointError, TrainConfig, count_macs, evaluate,
                    format_metrics_row, forward, init_params, load_checkpoint, save_checkpoint,
                    train)
from .tensor import NumericalError
from . import tensor as T

log = logging.getLogger("corrseg")

OUT_ENV = "CORRSEG_OUT"
CHECKPOINT = "model.ckpt"
METRICS = "metrics.csv"
EFFECTIVE_CONFIG = "config.txt"


class UsageError(Exception):
    pass


def output_dir(args: argparse.Namespace) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def benchmark(run: C.RunConfig, fold: int | None = None) -> Benchmark:
    bench_cfg = run.bench if fold is None else C.build(run.as_dict(), {"fold": fold}).bench
    return Benchmark(bench_cfg, num_stages=run.train.num_stages)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def print_table(header: Sequence[str], rows: Sequence[Sequence]) -> None:
    cells = [[str(h) for h in header]] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for n, r in enumerate(cells):
        print("  ".join(v.rjust(w) for v, w in zip(r, widths)))
        if n == 0:
            print("  ".join("-" * w for w in widths))


# --------------------------------------------------------------------------
# train


def cmd_train(args, run: C.RunConfig, out: Path) -> int:
    bench = benchmark(run)
    metrics = out / METRICS
    with open(metrics, "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")

    def on_epoch(row):
        with open(metrics, "a") as fh:
            fh.write(format_metrics_row(row) + "\n")

    result = train(bench, run.train, on_epoch=on_epoch)
    save_checkpoint(result.params, out / CHECKPOINT)
    final = result.log[-1].heldout_miou if result.log else float("nan")
    print(f"trained {run.train.epochs} epochs; held-out mIoU {final:.4f}; wrote {out}")
    return 0


# --------------------------------------------------------------------------
# eval


def _checkpoint_run(path: Path, base: C.RunConfig, overrides: dict) -> C.RunConfig:
    """A checkpoint's own config.txt (if present) under the command-line overrides."""
    sidecar = path.parent / EFFECTIVE_CONFIG
    if sidecar.exists():
        return C.build(C.read_pairs(sidecar.read_text(), str(sidecar)), overrides)
    return base


def cmd_eval(args, run: C.RunConfig, out: Path) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs at least one --checkpoint")
    rows = []
    overrides = dict(args.overrides)
    if args.kshot is not None:
        overrides["shots"] = str(args.kshot)
    for ck in args.checkpoint:
        ck = Path(ck)
        ck_run = _checkpoint_run(ck, run, overrides)
        params = load_checkpoint(ck, ck_run.train)
        shots = ck_run.train.shots
        bench = benchmark(ck_run)
        counts = evaluate(params, ck_run.train, bench.eval_episodes(shots))
        rows.append([ck_run.bench.fold, shots, str(ck), counts.miou(), counts.fb_iou()])
    rows.sort(key=lambda r: r[0])
    mean_row = ["mean", rows[0][1], "", float(np.mean([r[3] for r in rows])), float(np.mean([r[4] for r in rows]))]
    header = ["fold", "shots", "checkpoint", "miou", "fbiou"]
    write_csv(out / "eval.csv", header, rows + [mean_row])
    print_table(header, rows + [mean_row])
    return 0


# --------------------------------------------------------------------------
# ablate


@dataclass
class Variant:
    name: str
    overrides: dict


GRIDS: dict[str, list[Variant]] = {
    "components": [
        Variant("hdm", {"matching": "cross_attention", "use_distill": False}),
        Variant("hdm+corr", {"use_distill": False}),
        Variant("hdm+corr+distill", {}),
    ],
    "matching": [
        Variant("CA", {"matching": "cross_attention"}),
        Variant("Cos", {"normalization": "none"}),
        Variant("Cos+SM", {"normalization": "softmax"}),
        Variant("Cos+Inv-SM", {"normalization": "inverse_softmax"}),
    ],
    "stages": [Variant(f"S{L}", {"num_stages": L}) for L in (1, 2, 3, 4)],
    "temperature": [Variant(f"T={t:g}", {"distill_temperature": t}) for t in (0.5, 1.0, 2.0, 5.0)],
    "support_mask": [Variant("with_mask", {}), Variant("without_mask", {"support_mask_ablation": True})],
    "distill": [Variant("distill", {}), Variant("no_distill", {"use_distill": False})],
}


def forward_ms(params, cfg: TrainConfig, episodes, repeats: int = 1) -> float:
    tensors = params.tensors()
    t0 = time.perf_counter()
    for _ in range(repeats):
        for ep in episodes:
            forward(ep, tensors, cfg)
    return 1000.0 * (time.perf_counter() - t0) / (repeats * len(episodes))


def run_variant(run: C.RunConfig, variant: Variant, seed: int) -> dict:
    vrun = C.build(run.as_dict(), {**variant.overrides, "seed": seed})
    bench = benchmark(vrun)
    episodes = bench.eval_episodes(vrun.train.shots)
    result = train(bench, vrun.train, eval_episodes=episodes)
    counts = evaluate(result.params, vrun.train, episodes)
    return {
        "variant": variant.name, "seed": seed, "miou": counts.miou(), "fbiou": counts.fb_iou(),
        "params": result.params.count(),
        "forward_ms": forward_ms(result.params, vrun.train, episodes[:10]),
        "macs": count_macs(vrun.train, vrun.bench.image_size),
    }


def ablate_rows(run: C.RunConfig, variants: Sequence[Variant], seeds: Sequence[int],
                progress: Callable[[dict], None] | None = None) -> tuple[list[dict], list[dict]]:
    """Per-seed rows and one summary row per variant (means over seeds)."""
    per_seed = []
    for v in variants:
        for s in seeds:
            row = run_variant(run, v, s)
            per_seed.append(row)
            if progress:
                progress(row)
    summary = []
    for v in variants:
        mine = [r for r in per_seed if r["variant"] == v.name]
        summary.append({
            "variant": v.name,
            "miou": float(np.mean([r["miou"] for r in mine])),
            "miou_std": float(np.std([r["miou"] for r in mine])),
            "params": mine[0]["params"],
            "forward_ms": float(np.mean([r["forward_ms"] for r in mine])),
            "macs": mine[0]["macs"],
            "per_seed": " ".join(f"{r['miou']:.4f}" for r in mine),
        })
    return per_seed, summary


def cmd_ablate(args, run: C.RunConfig, out: Path) -> int:
    if args.grid not in GRIDS:
        raise UsageError(f"unknown grid {args.grid!r}; choose from {sorted(GRIDS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seeds {args.seeds!r}") from None
    if not seeds:
        raise UsageError("need at least one seed")

    def progress(row):
        log.info("%s seed %d: miou %.4f", row["variant"], row["seed"], row["miou"])

    per_seed, summary = ablate_rows(run, GRIDS[args.grid], seeds, progress)
    seed_cols = ["variant", "seed", "miou", "fbiou", "params", "forward_ms", "macs"]
    write_csv(out / "ablate_seeds.csv", seed_cols, [[r[k] for k in seed_cols] for r in per_seed])
    cols = ["variant", "miou", "miou_std", "params", "forward_ms", "macs", "per_seed"]
    rows = [[r[k] for k in cols] for r in summary]
    write_csv(out / "ablate.csv", cols, rows)
    print_table(cols, rows)
    return 0


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, run: C.RunConfig, out: Path) -> int:
    from .gradsuite import group_summary, run_suite

    results = run_suite(include_model=not args.skip_model, inject_sign_bug=args.inject_sign_bug)
    groups = group_summary(results)
    tol = results[0].report.tol
    rows = [[g, err, "pass" if err < tol else "FAIL"] for g, err in groups.items()]
    write_csv(out / "gradcheck.csv", ["group", "max_rel_error", "status"], rows)
    write_csv(out / "gradcheck_cases.csv", ["group", "case", "max_rel_error", "entries"],
              [[r.group, r.name, r.report.max_rel_error, r.report.n_entries] for r in results])
    print_table(["group", "max_rel_error", "status"], [[g, f"{e:.3e}", s] for g, e, s in rows])
    failed = [g for g, _, s in rows if s == "FAIL"]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


# --------------------------------------------------------------------------
# heatmaps


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Blend a [0, 1] heat map (already at image size) over an RGB image as a red tint."""
    tint = np.stack([heat, np.zeros_like(heat), 1.0 - heat])
    return np.clip(0.5 * np.asarray(image) + 0.5 * tint, 0.0, 1.0)


def cmd_heatmaps(args, run: C.RunConfig, out: Path) -> int:
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise UsageError("heatmaps needs exactly one --checkpoint")
    params = load_checkpoint(args.checkpoint[0], run.train)
    bench = benchmark(run)
    size = run.bench.image_size
    ep = sample_episode(bench.split.test_ids, run.train.shots, args.episode_seed, size, size, bench.classes,
                        run.train.num_stages, run.bench.min_objects, run.bench.max_objects)
    res = forward(ep, params, run.train)
    rows = []
    for m, sm in zip(res.maps, res.stage_masks):
        dist = spatial_softmax(reduce_map(m.values, sm), run.train.distill_temperature).data
        grid = dist.reshape(m.query_size)
        name = f"stage{m.stage}_corr.pgm"
        write_pgm(out / name, minmax_gray(grid))
        up = T.bilinear_resize(grid[None], size, size).data[0]
        span = up.max() - up.min()
        heat = (up - up.min()) / span if span > 0 else np.full_like(up, 0.5)
        ov = f"stage{m.stage}_overlay.ppm"
        write_ppm(out / ov, overlay(ep.query_image, heat))
        rows.append(["heatmap", m.stage, f"{m.query_size[0]}x{m.query_size[1]}", name, ov])
    pred = (res.logits.data[1] > res.logits.data[0]).astype(np.uint8)
    write_pgm(out / "pred_mask.pgm", pred * 255)
    write_pgm(out / "gt_mask.pgm", (np.asarray(ep.query_mask) > 0).astype(np.uint8) * 255)
    write_ppm(out / "query.ppm", ep.query_image)
    rows += [["mask", "pred", f"{size}x{size}", "pred_mask.pgm", ""],
             ["mask", "gt", f"{size}x{size}", "gt_mask.pgm", ""]]
    lines = [f"# episode_seed={args.episode_seed} class={ep.class_id}", "kind\tstage\tsize\tfile\toverlay"]
    lines += ["\t".join(str(v) for v in r) for r in rows]
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(res.maps)} stage heatmaps and 2 masks to {out}")
    return 0


# --------------------------------------------------------------------------
# dump-episodes


def cmd_dump(args, run: C.RunConfig, out: Path) -> int:
    bench = benchmark(run)
    episodes = bench.eval_episodes(run.train.shots)[: args.count]
    manifest = dump_episodes(episodes, out)
    print(f"wrote {len(episodes)} episodes; manifest {manifest}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "heatmaps": cmd_heatmaps,
    "dump-episodes": cmd_dump,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrseg", description=__doc__.split("\n")[0],
                                     epilog="Any config key can be overridden with --key value.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name})")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "heatmaps"):
            p.add_argument("--checkpoint", action="append", default=[], help="may repeat for eval")
        if name == "eval":
            p.add_argument("--kshot", type=int, default=None)
        if name == "ablate":
            p.add_argument("--grid", default="components", help=f"one of {', '.join(GRIDS)}")
            p.add_argument("--seeds", default="0,1,2,3,4")
        if name == "gradcheck":
            p.add_argument("--skip-model", action="store_true", help="omit the end-to-end loss cases")
            p.add_argument("--inject-sign-bug", action="store_true", help="harness self-test")
        if name == "heatmaps":
            p.add_argument("--episode-seed", type=int, default=0)
        if name == "dump-episodes":
            p.add_argument("--count", type=int, default=8)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.overrides = C.parse_overrides(rest)
        run = C.load(args.config, args.overrides)
        out = output_dir(args)
        run.write(out / EFFECTIVE_CONFIG)
        return COMMANDS[args.command](args, run, out)
    except (C.ConfigError, UsageError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
