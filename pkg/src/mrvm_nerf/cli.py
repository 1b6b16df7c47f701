"""Command-line entry points: scene generation, training, rendering, ablations.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command drops a metadata JSON (config snapshot, version, seed) next to
its outputs so a run can be reproduced from that file alone.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .scenegen import (GenConfig, emit_dataset, orbit_cameras, sample_scene,
                       write_ppm, quantize)
from .trainer import (SceneData, TrainConfig, evaluate, load_checkpoint, run)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}")
    except OSError as e:
        raise DataError(str(e))


class DataError(Exception):
    pass


def _write_metadata(out_dir, command, config, seed, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"command": command, "version": __version__, "seed": seed,
            "config": config, "argv": sys.argv[1:]}
    if extra:
        meta.update(extra)
    with open(out_dir / "run_metadata.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def _train_config(args) -> TrainConfig:
    base = _load_json(args.config) if args.config else {}
    cfg = TrainConfig.from_json(base)
    for field in ("total_iters", "batch_rays", "lr", "seed", "mask_ratio",
                  "mrvm_mode", "n_views", "tau", "lambda_base", "max_train_views",
                  "checkpoint_every"):
        v = getattr(args, field, None)
        if v is not None:
            setattr(cfg, field, v)
    return cfg


def _scene_dirs(data_root) -> list:
    root = Path(data_root)
    if (root / "manifest.json").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if (d / "manifest.json").exists())
    if not dirs:
        raise DataError(f"no scene manifests under {root}")
    return dirs


# ---------------------------------------------------------------------------
# commands

def cmd_gen_scenes(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force)")
    if args.count == 0:
        print("warning: --count 0, nothing to do")
        _write_metadata(out, "gen-scenes", {"count": 0}, args.seed)
        return 0
    gen_cfg = GenConfig(**_load_json(args.config)) if args.config else GenConfig()
    for i in range(args.count):
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, i)))
        scene = sample_scene(rng, gen_cfg, scene_id=f"scene_{i:03d}")
        cams = orbit_cameras(args.n_views, args.width, args.height)
        emit_dataset(scene, cams, out / f"scene_{i:03d}", n_test=args.n_test)
    _write_metadata(out, "gen-scenes",
                    {"gen": dataclasses.asdict(gen_cfg), "count": args.count,
                     "width": args.width, "height": args.height,
                     "n_views": args.n_views, "n_test": args.n_test}, args.seed)
    print(f"emitted {args.count} scenes ({args.n_views} views of "
          f"{args.width}x{args.height}) under {out}")
    return 0


def cmd_train(args, mode):
    cfg = _train_config(args)
    dirs = _scene_dirs(args.data)
    _write_metadata(args.workdir, mode, cfg.to_json(), cfg.seed,
                    {"data": [str(d) for d in dirs]})
    result = run(cfg, dirs, mode, args.workdir, resume_from=args.ckpt)
    print(f"{mode} finished: checkpoint {result['checkpoint']}, "
          f"metrics {result['metrics']}")
    return 0


def cmd_render(args):
    if not Path(args.ckpt).exists():
        raise DataError(f"checkpoint not found: {args.ckpt}")
    model, _, _, cfg = load_checkpoint(args.ckpt)
    scene = SceneData(_scene_dirs(args.scene)[0])
    if not (0 <= args.view < len(scene.cameras)):
        raise DataError(f"view {args.view} out of range 0..{len(scene.cameras) - 1}")
    from .geometry import pixel_directions
    from .scenegen import ray_bbox_range
    cam = scene.cameras[args.view]
    from .trainer import reference_views
    refs = reference_views(scene, cfg.n_views)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    dirs = pixel_directions(cam, xs.ravel(), ys.ravel())
    m = scene.manifest
    t_near, t_far, _ = ray_bbox_range(m.bbox_min, m.bbox_max,
                                      cam.center[None, :], dirs)
    img = model.render_view([scene.images[i] for i in refs],
                            [scene.cameras[i] for i in refs], cam, t_near, t_far)
    write_ppm(args.out, quantize(img))
    _write_metadata(Path(args.out).parent, "render", cfg.to_json(), cfg.seed,
                    {"scene": str(args.scene), "view": args.view})
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    if not Path(args.ckpt).exists():
        raise DataError(f"checkpoint not found: {args.ckpt}")
    model, _, _, cfg = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for d in _scene_dirs(args.scene):
        reports.append(evaluate(model, SceneData(d), cfg.n_views))
    with open(out / "eval_report.json", "w") as f:
        json.dump(reports, f, indent=1, sort_keys=True)
    with open(out / "eval_report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene_id", "view", "psnr", "ssim"])
        for rep in reports:
            for row in rep["views"]:
                w.writerow([rep["scene_id"], row["view"],
                            f"{row['psnr']:.4f}", f"{row['ssim']:.6f}"])
    _write_metadata(out, "eval", cfg.to_json(), cfg.seed)
    for rep in reports:
        print(f"{rep['scene_id']}: PSNR {rep['mean_psnr']:.2f} dB, "
              f"SSIM {rep['mean_ssim']:.4f}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck
    worst = run_gradcheck(verbose=True)
    if worst > 1e-4:
        print(f"FAIL: max relative gradient error {worst:.3e} > 1e-4")
        return EXIT_NUMERICAL
    print(f"OK: max relative gradient error {worst:.3e}")
    return 0


def cmd_ablate_mask(args):
    ratios = [float(r) for r in args.ratios.split(",")]
    for r in ratios:
        if not (0.0 <= r <= 1.0):
            raise DataError(f"mask ratio {r} outside [0,1]")
    train_dirs = _scene_dirs(args.data)
    hold_dirs = _scene_dirs(args.holdout) if args.holdout else train_dirs
    workdir = Path(args.workdir)
    rows = []
    for r in ratios:
        cfg = _train_config(args)
        cfg.mask_ratio = r  # identical seed across ratios: controlled sweep
        sub = workdir / f"ratio_{r:g}"
        pre = run(cfg, train_dirs, "pretrain", sub / "pretrain")
        ft_cfg = dataclasses.replace(cfg)
        res = run(ft_cfg, train_dirs, "finetune", sub / "finetune",
                  resume_from=pre["checkpoint"])
        scores = [evaluate(res["model"], SceneData(d), cfg.n_views)
                  for d in hold_dirs]
        rows.append({"ratio": r,
                     "psnr": float(np.mean([s["mean_psnr"] for s in scores])),
                     "ssim": float(np.mean([s["mean_ssim"] for s in scores]))})
    _write_sweep_csv(workdir / "ablate_mask.csv", ["ratio", "psnr", "ssim"], rows)
    _write_metadata(workdir, "ablate-mask", _train_config(args).to_json(),
                    _train_config(args).seed, {"ratios": ratios})
    print(f"wrote {workdir / 'ablate_mask.csv'} ({len(rows)} rows)")
    return 0


def cmd_ablate_fewshot(args):
    configs = []
    for item in args.configs.split(","):
        tv, rv = item.split(":")
        configs.append((int(tv), int(rv)))
    train_dirs = _scene_dirs(args.data)
    workdir = Path(args.workdir)
    rows = []
    for tv, rv in configs:
        cfg = _train_config(args)
        cfg.max_train_views = tv
        cfg.n_views = rv
        sub = workdir / f"fewshot_{tv}_{rv}"
        res = run(cfg, train_dirs, "finetune", sub)
        scores = [evaluate(res["model"], SceneData(d), rv) for d in train_dirs]
        rows.append({"train_views": tv, "ref_views": rv,
                     "psnr": float(np.mean([s["mean_psnr"] for s in scores])),
                     "ssim": float(np.mean([s["mean_ssim"] for s in scores]))})
    _write_sweep_csv(workdir / "ablate_fewshot.csv",
                     ["train_views", "ref_views", "psnr", "ssim"], rows)
    _write_metadata(workdir, "ablate-fewshot", _train_config(args).to_json(),
                    _train_config(args).seed, {"configs": configs})
    print(f"wrote {workdir / 'ablate_fewshot.csv'} ({len(rows)} rows)")
    return 0


def _write_sweep_csv(path, columns, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v)
                        for k, v in row.items()})


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="mrvm-nerf",
                description="Masked ray/view pretraining for a desk-scale "
                            "generalizable radiance field")
    p.add_argument("--threads", type=int, default=1,
                   help="worker hint; results are independent of this value")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="emit a procedural multi-view corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="GenConfig JSON")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--n-views", dest="n_views", type=int, default=12)
    g.add_argument("--n-test", dest="n_test", type=int, default=2)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_scenes)

    def add_train_args(sp, with_ckpt=False):
        sp.add_argument("--config", help="TrainConfig JSON")
        sp.add_argument("--data", required=True)
        sp.add_argument("--workdir", required=True)
        if with_ckpt:
            sp.add_argument("--ckpt", help="checkpoint to resume/finetune from")
        for name, typ in (("total-iters", int), ("batch-rays", int), ("lr", float),
                          ("seed", int), ("mask-ratio", float), ("n-views", int),
                          ("tau", float), ("lambda-base", float),
                          ("max-train-views", int), ("checkpoint-every", int)):
            sp.add_argument(f"--{name}", dest=name.replace("-", "_"),
                            type=typ, default=None)
        sp.add_argument("--mrvm-mode", dest="mrvm_mode", default=None,
                        choices=["default", "featmask1", "featmask2", "off"])

    t = sub.add_parser("pretrain", help="joint rendering + masked-alignment training")
    add_train_args(t, with_ckpt=True)
    t.set_defaults(fn=lambda a: cmd_train(a, "pretrain"))

    t = sub.add_parser("finetune", help="rendering-loss-only training")
    add_train_args(t, with_ckpt=True)
    t.set_defaults(fn=lambda a: cmd_train(a, "finetune"))

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--view", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on held-out views")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.set_defaults(fn=cmd_gradcheck)

    am = sub.add_parser("ablate-mask", help="mask-ratio sweep")
    add_train_args(am)
    am.add_argument("--ratios", default="0.1,0.25,0.5,0.75,0.9")
    am.add_argument("--holdout", help="held-out scene corpus for scoring")
    am.set_defaults(fn=cmd_ablate_mask)

    af = sub.add_parser("ablate-fewshot", help="few-shot view-count sweep")
    add_train_args(af)
    af.add_argument("--configs", default="50:5,20:4,10:3",
                    help="train_views:ref_views pairs")
    af.set_defaults(fn=cmd_ablate_fewshot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
