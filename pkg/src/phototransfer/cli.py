"""Command-line surface: synth, stereo, train, infer, eval.

Exit codes: 0 success, 2 usage or precondition failure, 1 internal error.
Diagnostics go to stderr; stdout carries short summaries only.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from .augment import AttributeKind
from .config import ConfigError, RunConfig, load_config
from .evaluate import EvalReport, infer, study_degrade, study_equivariance, study_lights, study_metrics
from .photometry import (Light, LightRig, angular_error_deg, generate_procedural_material, photometric_stereo,
                         render_lambertian, render_stack, sample_light_rig, stripes_mask, substream)
from .trainer import AttributeMap, Checkpoint, make_variant, train, write_loss_csv

logger = logging.getLogger("phototransfer")


class UsageError(Exception):
    pass


def _threads(n: int) -> int:
    return n if n and n > 0 else (os.cpu_count() or 1)


@contextlib.contextmanager
def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # BLAS keeps its own default
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "threads", "iterations", "batch_size", "lr", "crop", "base_channels",
                "variant", "kind", "tile", "overlap"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = str(v)
    return load_config(args.config, overrides)


def read_attribute(path, kind: AttributeKind) -> np.ndarray:
    if kind.name == "normals":
        return ds.read_normals(path)
    if kind.name == "segmentation":
        return ds.read_mask(path)
    img = ds.read_png(path)
    if img.shape[0] != kind.dims:
        raise UsageError(f"{path}: expected {kind.dims} channels for {kind.name}, found {img.shape[0]}")
    return img


def write_attribute(path, data: np.ndarray, kind: AttributeKind) -> None:
    if kind.name == "normals":
        ds.write_normals(path, data)
    elif kind.name == "segmentation":
        ds.write_mask(path, data)
    else:
        ds.write_png(path, np.clip(data, 0, 1))


def read_guidance(path) -> np.ndarray:
    img = ds.read_png(path)
    if img.shape[0] != 3:
        raise UsageError(f"{path}: guidance must be an RGB image, found {img.shape[0]} channel(s)")
    return img


def describe_train_config(tc) -> str:
    return f"iterations={tc.iterations} batch={tc.batch_size} lr={tc.lr:g}"


# --- commands -------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = w = args.size
    material = generate_procedural_material(args.kind, h, w, cfg.seed)
    rig = LightRig(sample_light_rig(args.lights, cfg.seed).lights + [Light.diffuse()])
    stack = render_stack(material, rig, args.noise, cfg.seed)
    files = []
    for i, (img, light) in enumerate(zip(stack.images, rig)):
        name = f"light_{i:02d}.png" if light.kind == "directional" else f"diffuse_{i:02d}.png"
        ds.write_png(out / name, img)
        files.append(name)
    truth = {"normals": "normals_gt.png", "albedo": "albedo_gt.png"}
    ds.write_normals(out / truth["normals"], material.normals)
    ds.write_png(out / truth["albedo"], material.albedo)
    if args.kind == "stripes":
        truth["mask"] = "mask_gt.png"
        ds.write_mask(out / truth["mask"], stripes_mask(h, w, cfg.seed))
    extra = {"material": args.kind, "seed": cfg.seed, "noise_std": args.noise, "ground_truth": truth}
    if args.guidance_size:
        gs = args.guidance_size
        big = generate_procedural_material(args.kind, gs, gs, cfg.seed)
        zen, azi = args.guidance_light
        img = render_lambertian(big, Light.from_angles(zen, azi), args.noise, substream(cfg.seed, "guidance"))
        guide = {"image": "guidance.png", "normals": "guidance_normals.png", "light": [zen, azi]}
        ds.write_png(out / guide["image"], img)
        ds.write_normals(out / guide["normals"], big.normals)
        if args.kind == "stripes":
            guide["mask"] = "guidance_mask.png"
            ds.write_mask(out / guide["mask"], stripes_mask(gs, gs, cfg.seed))
        extra["guidance"] = guide
    ds.write_manifest(out, stack, files, extra)
    print(f"wrote {len(files)} images ({args.lights} directional + 1 diffuse) to {out}")
    return 0


def cmd_stereo(args, cfg: RunConfig) -> int:
    src = Path(args.dataset)
    doc = ds.read_manifest(src)
    stack = ds.load_stack(src)
    if sum(l.kind == "directional" for l in stack.rig) < 3:
        raise UsageError("photometric stereo needs at least 3 directional images in the manifest")
    result = photometric_stereo(stack)
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    ds.write_normals(out / "normals.png", result.normals)
    ds.write_png(out / "albedo.png", np.clip(result.albedo, 0, 1))
    ds.write_mask(out / "validity.png", result.valid.astype(np.float32))
    print(f"valid pixels: {result.valid.mean() * 100:.2f}%")
    gt_name = doc.get("ground_truth", {}).get("normals")
    if gt_name and (src / gt_name).is_file():
        gt = ds.read_normals(src / gt_name)
        err = angular_error_deg(result.normals, gt)[result.valid]
        print(f"mean angular error: {err.mean():.4f} deg")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    kind = cfg.attribute_kind()
    stack = ds.load_stack(args.dataset)
    attr = read_attribute(args.attribute, kind)
    if attr.shape[1:] != stack.size:
        raise UsageError(f"attribute is {attr.shape[2]}x{attr.shape[1]} but the dataset is {stack.size[1]}x{stack.size[0]}")
    stack = make_variant(stack, cfg.variant)
    tc = cfg.train_config()
    print(describe_train_config(tc))
    out = Path(args.out) if args.out else Path(args.dataset) / f"{cfg.variant}.pxfr"
    curve_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    threads = _threads(cfg.threads)

    def progress(it, loss):
        if args.log_every and (it % args.log_every == 0 or it == tc.iterations - 1):
            logger.info("iteration %d loss %.5f", it, loss)

    ckpt = train(stack, AttributeMap(attr, kind), tc, cfg.unet_config(), cfg.variant, threads, progress)
    ckpt.save(out)
    write_loss_csv(curve_path, ckpt.loss_curve)
    print(f"wall_clock={ckpt.wall_clock:.1f}s final_loss={ckpt.loss_curve[-1]:.5f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    guidance = read_guidance(args.guidance)
    pred = infer(ckpt, guidance, cfg.tile_plan(), _threads(cfg.threads))
    write_attribute(args.out, pred, ckpt.kind)
    print(f"wrote {pred.shape[2]}x{pred.shape[1]} {ckpt.kind.name} map to {args.out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpts = [Checkpoint.load(p) for p in args.checkpoint]
    kind = ckpts[0].kind
    if any(c.kind != kind for c in ckpts):
        raise UsageError("all checkpoints must predict the same attribute kind")
    guidance = read_guidance(args.guidance)
    gid = args.name or Path(args.guidance).stem
    gt = None
    if args.gt:
        gt = read_attribute(args.gt, kind)
        if gt.shape[1:] != guidance.shape[1:]:
            raise UsageError("ground truth and guidance sizes differ")
    if args.study in ("metrics", "lights") and gt is None:
        raise UsageError(f"the {args.study} study needs --gt")
    plan = cfg.tile_plan()
    report = EvalReport()
    if args.study == "metrics":
        for c in ckpts:
            study_metrics(c, guidance, gt, gid, plan, report)
    elif args.study == "equivariance":
        for c in ckpts:
            study_equivariance(c, guidance, gid, plan, report)
    elif args.study == "lights":
        study_lights(ckpts, guidance, gt, gid, plan, report)
    else:
        for c in ckpts:
            study_degrade(c, guidance, gid, cfg.seed, plan, report)
    report.to_csv(args.out)
    for g, d, m, v in report.rows:
        print(f"{d},{m},{v:.6g}")
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker and BLAS threads (default: all cores)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="phototransfer", description="Transfer visual attributes from photometric stacks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic photometric dataset")
    s.add_argument("--kind", default="woven", choices=("woven", "bumps", "stripes"))
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--lights", type=int, default=27)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--guidance-size", type=int, default=0, help="also render a guidance image of this size")
    s.add_argument("--guidance-light", type=float, nargs=2, default=(35.0, 17.0), metavar=("ZENITH", "AZIMUTH"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("stereo", parents=[common], help="photometric stereo on a dataset")
    s.add_argument("dataset")
    s.add_argument("--out", help="output directory (default: the dataset)")
    s.set_defaults(func=cmd_stereo)

    s = sub.add_parser("train", parents=[common], help="train one network")
    s.add_argument("dataset")
    s.add_argument("attribute")
    s.add_argument("--kind", choices=("normals", "segmentation", "color"))
    s.add_argument("--variant", help="diffuseNet, photometricNet, diphotoNet or reduced(k)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--crop", type=int)
    s.add_argument("--base-channels", dest="base_channels", type=int)
    s.add_argument("--loss-csv", help="loss curve path (default: next to the checkpoint)")
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--out", help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="transfer an attribute to a guidance image")
    s.add_argument("checkpoint")
    s.add_argument("guidance")
    s.add_argument("--tile", type=int)
    s.add_argument("--overlap", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="run an evaluation study")
    s.add_argument("--study", required=True, choices=("metrics", "equivariance", "lights", "degrade"))
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--guidance", required=True)
    s.add_argument("--gt", help="ground-truth attribute for metrics and lights")
    s.add_argument("--name", help="guidance identifier in the report")
    s.add_argument("--tile", type=int)
    s.add_argument("--overlap", type=int)
    s.add_argument("--out", required=True, help="report CSV")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _run_config(args)
        start = time.perf_counter()
        with _thread_limit(_threads(cfg.threads)):
            code = args.func(args, cfg)
        logger.debug("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return code
    except (UsageError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
