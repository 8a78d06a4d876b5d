"""``loopsplat`` command line.

Exit status is 0 on success, 1 for bad input (flags, config, malformed
files) and 2 when the pipeline itself fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import _kernels, harness, pgi, rasterizer
from .config import ConfigError, RunConfig, build_run, default_config_dict, load_config
from .imageio import read_image, write_pfm, write_ppm
from .sfm import (filter_match_error, filter_pseudo_only, label_images, parse_colmap_text,
                  project_sparse_depth, write_colmap_text)
from .trainer import View, evaluate, read_checkpoint, train, write_checkpoint, write_metric_log

log = logging.getLogger("loopsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config: bool = True,
            out_help: str = "output directory (overrides output_dir)") -> None:
    if config:
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--out", help=out_help)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--threads", type=int, help="worker threads for the blend kernels")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="loopsplat", description="Sparse-view Gaussian splatting with "
                 "progressive initialization.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="initial SfM model and Gaussian cloud")
    _common(p)

    p = sub.add_parser("train", help="single training run on the initial model")
    _common(p)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("loop", help="full progressive-initialization pipeline")
    _common(p)
    p.add_argument("--loops", type=int)
    p.add_argument("--iterations", type=int, help="iterations per loop")

    p = sub.add_parser("render", help="render a checkpoint to PPM + PFM")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rig", required=True, help="camera JSON written by init")
    p.add_argument("--view", action="append", help="camera name (repeatable; default all)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))

    p = sub.add_parser("depth", help="filtered sparse depth maps from a COLMAP text model")
    _common(p, config=False)
    p.add_argument("--colmap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pseudo-names", nargs="*", help="image names to treat as pseudo views")
    for i in (1, 2, 3):
        p.add_argument(f"--no-filter{i}", action="store_true")

    p = sub.add_parser("pseudo", help="pseudo cameras for one loop index, as JSON")
    _common(p, out_help="write the JSON here instead of stdout")
    p.add_argument("--rig", help="use every camera in this rig file as a training camera")
    p.add_argument("--loop", type=int, required=True)

    p = sub.add_parser("eval", help="PSNR / SSIM of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rig", help="camera JSON; images are read from --images")
    p.add_argument("--images", help="directory of <camera name>.ppm ground truth")
    p.add_argument("--json", dest="json_out", help="write the table as JSON here")

    sub.add_parser("defaults", help="print the default run config")
    return ap


def _config(args) -> RunConfig:
    cfg = _load_inputs(load_config, args.config) if getattr(args, "config", None) \
        else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if getattr(args, "out", None) and args.command != "pseudo":
        cfg.output_dir = args.out
    if getattr(args, "iterations", None) is not None:
        if args.iterations < 0:
            raise ConfigError("--iterations must be >= 0")
        cfg.train = replace(cfg.train, iterations=args.iterations)
        cfg.pgi = replace(cfg.pgi, iterations_per_loop=args.iterations)
    if getattr(args, "loops", None) is not None:
        if args.loops < 0:
            raise ConfigError("--loops must be >= 0")
        cfg.pgi = replace(cfg.pgi, loops=args.loops)
    cfg.sync()
    return cfg


def _write_rig(path: Path, run) -> None:
    harness.save_rig(path, [v.camera for v in run.training + run.held_out])


def cmd_init(args) -> int:
    cfg = _config(args)
    run = build_run(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, cloud = pgi.prepare(run.initial_model)
    write_colmap_text(run.initial_model, out / "sparse_init")
    write_checkpoint(out / "init.ckpt", cloud, run.extent, 0, cfg.seed)
    _write_rig(out / "rig.json", run)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
    print(f"{len(model.points)} points, {len(cloud)} Gaussians -> {out / 'init.ckpt'}")
    return 0


def _pipeline(cfg: RunConfig, loops: int, iterations: int) -> int:
    run = build_run(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = replace(cfg.train, iterations=iterations)
    records = []

    def train_fn(cloud, views, loop):
        cloud, mlog = train(cloud, views, tcfg, cfg.densify, cfg.losses, run.extent)
        records.extend({**r, "loop": loop} for r in mlog)
        return cloud, mlog

    pcfg = replace(cfg.pgi, loops=loops)
    cloud, state = pgi.run_pgi(run.initial_model, run.training, run.sfm_provider,
                               run.mono_provider, train_fn, pcfg, out, cfg.train.background)
    write_checkpoint(out / "final.ckpt", cloud, run.extent, (loops + 1) * iterations, cfg.seed)
    write_metric_log(out / "metrics.jsonl", records)
    _write_rig(out / "rig.json", run)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
    report = evaluate(cloud, run.training + run.held_out, cfg.train.background)
    (out / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"points per loop {state.point_counts}; {len(cloud)} Gaussians; "
          f"mean PSNR {report['mean_psnr']:.2f} dB -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    return _pipeline(cfg, 0, cfg.train.iterations)


def cmd_loop(args) -> int:
    cfg = _config(args)
    return _pipeline(cfg, cfg.pgi.loops, cfg.pgi.iterations_per_loop)


def _load_inputs(fn, *a):
    try:
        return fn(*a)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(str(e)) from e


def cmd_render(args) -> int:
    cloud, _ = _load_inputs(read_checkpoint, args.checkpoint)
    cams = _load_inputs(harness.load_rig, args.rig)
    if args.view:
        by_name = {c.name: c for c in cams}
        missing = [n for n in args.view if n not in by_name]
        if missing:
            raise ConfigError(f"--view: no camera named {missing[0]!r} in {args.rig}")
        cams = [by_name[n] for n in args.view]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in cams:
        r = rasterizer.render(cloud, c, tuple(args.background))
        write_ppm(out / f"{c.name}.ppm", r.color)
        write_pfm(out / f"{c.name}_depth.pfm", r.depth)
    print(f"rendered {len(cams)} view(s) -> {out}")
    return 0


def cmd_depth(args) -> int:
    model = _load_inputs(parse_colmap_text, args.colmap)
    label_images(model, args.pseudo_names)
    if not args.no_filter2:
        model = filter_pseudo_only(model)
    eligible = None if args.no_filter1 else filter_match_error(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for iid in sorted(model.images):
        d = project_sparse_depth(model, iid, eligible, use_tracks=not args.no_filter3)
        write_pfm(out / (Path(model.images[iid].name).stem + ".pfm"), d)
    print(f"wrote {len(model.images)} depth map(s) -> {out}")
    return 0


def cmd_pseudo(args) -> int:
    cfg = _config(args)
    if args.loop < 0:
        raise ConfigError("--loop must be >= 0")
    if args.rig:
        cams = _load_inputs(harness.load_rig, args.rig)
    else:
        cams = [v.camera for v in build_run(cfg).training]
    pseudo = pgi.gen_pseudo_cameras(cams, args.loop, cfg.pgi)
    text = json.dumps([c.to_json() for c in pseudo], indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def format_table(report: dict) -> str:
    rows = [(r["name"], f"{r['psnr']:.3f}", f"{r['ssim']:.4f}") for r in report["views"]]
    rows.append(("mean", f"{report['mean_psnr']:.3f}", f"{report['mean_ssim']:.4f}"))
    w = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(("view", "psnr", "ssim"))]
    lines = [f"{'view':<{w[0]}}  {'psnr':>{w[1]}}  {'ssim':>{w[2]}}"]
    lines += [f"{a:<{w[0]}}  {b:>{w[1]}}  {c:>{w[2]}}" for a, b, c in rows]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    cloud, _ = _load_inputs(read_checkpoint, args.checkpoint)
    if args.rig:
        if not args.images:
            raise ConfigError("--rig needs --images")
        cams = _load_inputs(harness.load_rig, args.rig)
        views = [View(c, "training", _load_inputs(read_image, Path(args.images) / f"{c.name}.ppm"))
                 for c in cams]
        bg = (0.0, 0.0, 0.0)
    else:
        cfg = _config(args)
        run = build_run(cfg)
        views = run.training + run.held_out
        bg = cfg.train.background
    report = evaluate(cloud, views, bg)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=1, sort_keys=True))
    print(format_table(report))
    return 0


def cmd_defaults(args) -> int:
    print(dump_defaults())
    return 0


COMMANDS = {"defaults": cmd_defaults, "init": cmd_init, "train": cmd_train, "loop": cmd_loop,
            "render": cmd_render, "depth": cmd_depth, "pseudo": cmd_pseudo, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"loopsplat: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _kernels.set_threads(getattr(args, "threads", None))
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"loopsplat: invalid input: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"loopsplat: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def dump_defaults() -> str:
    return json.dumps(default_config_dict(), indent=1, sort_keys=True)


if __name__ == "__main__":
    sys.exit(main())
