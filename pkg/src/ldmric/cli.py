"""Command-line entry point: ``ldmric {train,enhance,evaluate,rd-plot}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
training failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, dump_config, load_config
from .data import build_pairs, list_images, load_precomputed_dir, synthetic_scene
from .errors import ConfigError, DataError, LdmRicError, TrainingError
from .images import read_png, write_png
from .metrics import RDPoint, get_metric, rd_csv, rd_curve, rd_svg, write_rd_csv
from .training import Stage2Models, check_tag, enhance, train_stage1, train_stage2

log = logging.getLogger("ldmric")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def _originals(cfg: RunConfig, root=None):
    root = root or cfg.data.root
    if root is None:
        d = cfg.data
        imgs = [synthetic_scene(d.synthetic_size, cfg.seed * 100003 + i) for i in range(d.synthetic_count)]
        return imgs, [f"syn{i:03d}" for i in range(len(imgs))]
    paths = list_images(root, cfg.data.manifest)
    return [read_png(p) for p in paths], [p.stem for p in paths]


def _pairs(cfg: RunConfig, quality=None, root=None):
    q = cfg.codec.quality if quality is None else quality
    if cfg.codec.name == "precomputed":
        return load_precomputed_dir(cfg.codec.root or root or cfg.data.root)
    originals, names = _originals(cfg, root)
    return build_pairs(originals, q, cfg.codec.name, names, **cfg.codec_options())


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.stage == 2 and not args.init_from:
        raise ConfigError("stage 2 requires --init-from <stage-1 checkpoint>")
    seed = cfg.seed if args.seed is None else args.seed
    tcfg = replace(cfg.train1 if args.stage == 1 else cfg.train2, seed=seed)
    if args.workers is not None:
        tcfg = replace(tcfg, workers=args.workers)
    ck1 = Checkpoint.load(args.init_from) if args.stage == 2 else None
    if ck1 is not None and ck1.stage != 1:
        raise ConfigError(f"--init-from must be a Stage-I checkpoint (got stage {ck1.stage})")
    data = _pairs(cfg)
    eval_data = _pairs(cfg, root=cfg.data.eval_root) if cfg.data.eval_root else None
    aug = cfg.augment_config(seed)

    out = Path(args.out)
    if args.stage == 1:
        ck, hist = train_stage1(data, cfg.model, tcfg, aug, tag=cfg.tag(), eval_data=eval_data)
    else:
        check_tag(ck1, cfg.tag())
        ck, hist = train_stage2(data, ck1, tcfg, aug)
    out.mkdir(parents=True, exist_ok=True)
    ck.save(out / "ckpt")
    (out / "log.csv").write_text(hist.to_csv(timing=not args.no_timing), encoding="utf-8")
    (out / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    print(f"stage {args.stage}: {len(hist.rows)} iterations, checkpoint at {out / 'ckpt'}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    if ck.stage != 2:
        raise ConfigError(f"enhance needs a Stage-II checkpoint; {args.ckpt} is stage {ck.stage}")
    models = Stage2Models.from_checkpoint(ck)
    inputs = sorted(Path(args.input_dir).glob("*.png"))
    if not inputs:
        raise DataError(f"no PNG files in {args.input_dir}")
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, p in enumerate(inputs):
        decoded = read_png(p)
        enhanced = enhance(decoded, models, seed=args.seed + i)
        write_png(out_dir / p.name, enhanced)
        if args.orig_dir:
            orig = read_png(Path(args.orig_dir) / p.name)
            enhanced = read_png(out_dir / p.name)
            rows.append((p.name, get_metric("psnr")(decoded, orig), get_metric("psnr")(enhanced, orig)))
    if rows:
        with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("name", "psnr_decoded_db", "psnr_enhanced_db"))
            for name, a, b in rows:
                wr.writerow((name, f"{a:.4f}", f"{b:.4f}"))
    print(f"enhanced {len(inputs)} images into {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    qualities = [float(q) for q in cfg.codec.qualities]
    loaded = []
    for path in args.ckpt or []:
        ck = Checkpoint.load(path)
        if ck.stage != 2:
            raise ConfigError(f"{path} is not a Stage-II checkpoint")
        check_tag(ck, {"codec": cfg.codec.name})
        loaded.append((float(ck.tag.get("quality", cfg.codec.quality)), Stage2Models.from_checkpoint(ck)))
    if len(loaded) == 1:
        # one checkpoint enhances every quality level
        ckpts = {q: loaded[0][1] for q in qualities}
    else:
        ckpts = dict(loaded)
        missing = [q for q in ckpts if q not in qualities]
        if missing:
            raise ConfigError(f"checkpoint quality {missing} not in codec.qualities {qualities}")
    if cfg.data.root is not None and not any(Path(cfg.data.root).glob("*.png")) and cfg.codec.name != "precomputed":
        raise DataError(f"no images under {cfg.data.root}")

    psnr_fn, ssim_fn = get_metric("psnr"), get_metric("ms_ssim")
    tagged = bool(ckpts)
    results = []
    for q in qualities:
        for i, s in enumerate(_pairs(cfg, q)):
            base = {"quality": q, "bpp": s.bpp, "curve": "baseline" if tagged else "",
                    "psnr": psnr_fn(s.decoded, s.original, cap=cfg.metrics.psnr_cap),
                    "ms_ssim": ssim_fn(s.decoded, s.original, max_scales=cfg.metrics.ms_ssim_scales)}
            results.append(base)
            if q in ckpts:
                x_hat = enhance(s.decoded, ckpts[q], seed=cfg.seed + i)
                results.append({**base, "curve": "enhanced",
                                "psnr": psnr_fn(x_hat, s.original, cap=cfg.metrics.psnr_cap),
                                "ms_ssim": ssim_fn(x_hat, s.original, max_scales=cfg.metrics.ms_ssim_scales)})
    points = rd_curve(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rd_csv(points, out / "rd.csv")
    (out / "rd.svg").write_text(rd_svg(points), encoding="utf-8")
    sys.stdout.write(rd_csv(points))
    return EXIT_OK


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path} holds no RD points")
    return [RDPoint(float(r["quality"]), float(r["bpp"]), float(r["psnr_db"]), float(r["ms_ssim"]),
                    int(r["n_images"]), r.get("curve", "")) for r in rows]


def cmd_rd_plot(args) -> int:
    points = read_rd_csv(args.csv)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rd_svg(points), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldmric", description="Decoder-side enhancement of lossy-coded images "
                                "with a diffusion-generated compression prior.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run Stage I or Stage II training")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-from", help="Stage-I checkpoint directory (stage 2 only)")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--no-timing", action="store_true", help="omit the wall_ms column from log.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance every PNG in a directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--input-dir", required=True)
    e.add_argument("--output-dir", required=True)
    e.add_argument("--orig-dir")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="baseline (and enhanced) rate-distortion table")
    v.add_argument("--config", required=True)
    v.add_argument("--ckpt", action="append", help="Stage-II checkpoint; repeat for several qualities")
    v.add_argument("--out", default=".")
    v.add_argument("--seed", type=int)
    v.add_argument("--workers", type=int, default=1)
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rd-plot", help="render an rd.csv as SVG")
    r.add_argument("--csv", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, LdmRicError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
