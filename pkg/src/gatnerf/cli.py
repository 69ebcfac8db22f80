"""Command-line interface: ``gatnerf <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric abort,
5 check failure.
"""

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, resolve
from .dataio import (DatasetError, generate_synthetic, load_dataset, orbit_camera, quantize, save_png,
                     scene_spec_from_manifest)
from .metrics import MetricReport

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5

log = logging.getLogger("gatnerf")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("GATNERF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"GATNERF_THREADS={env!r} is not an integer", EXIT_CONFIG) from None
    return 1


def _config(args, extra=()):
    overrides = list(getattr(args, "set", None) or []) + list(extra)
    cfg = resolve(args.preset, args.config, overrides)
    print("resolved config:", cfg.to_json(), flush=True)
    return cfg


def _add_config_flags(p, default_preset="paper"):
    p.add_argument("--preset", default=default_preset, help="paper | desk (default: %(default)s)")
    p.add_argument("--config", help="JSON file with section -> key -> value overrides")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")


def _parse_delta_overrides(items, dim):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--delta {item!r} is not of the form INDEX=VALUE", EXIT_CONFIG)
        k, v = item.split("=", 1)
        try:
            k, v = int(k), float(v)
        except ValueError:
            raise CliError(f"--delta {item!r}: index must be int and value float", EXIT_CONFIG) from None
        if not 0 <= k < dim:
            raise CliError(f"--delta index {k} out of range for {dim}-dim expressions", EXIT_CONFIG)
        out[k] = v
    return out


def _frames_for(dataset, split, indices):
    if indices:
        try:
            return [dataset.frame(int(i)) for i in indices.split(",")]
        except (KeyError, ValueError) as exc:
            raise CliError(f"unknown frame {exc}", EXIT_CONFIG) from None
    if split == "all":
        return list(dataset.frames)
    frames = dataset.train if split == "train" else dataset.test
    return frames or list(dataset.frames)


def _load_state(path):
    from .trainer import load_checkpoint

    if not os.path.exists(path):
        raise CliError(f"checkpoint {path} not found", EXIT_IO)
    return load_checkpoint(path)


def _check_delta_dim(state, dataset):
    want = state.config.field.delta_dim
    got = dataset.manifest.delta_dim
    if want != got:
        raise CliError(f"dataset has {got}-dim expressions, model expects {want}", EXIT_CONFIG)


def _gamma_for(state, frame, mode):
    if mode == "zero":
        return np.zeros(state.config.field.latent_dim, dtype=state.latents.codes.dtype)
    if mode == "mean":
        return state.latents.codes.data.mean(axis=0)
    from .trainer import frame_gamma

    return frame_gamma(state, frame.index)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    extra = []
    for key in ("frames", "size", "seed"):
        val = getattr(args, key)
        if val is not None:
            extra.append(f"scene.{key}={val}")
    cfg = _config(args, extra)
    manifest = generate_synthetic(cfg.scene, args.out, threads=_threads(args))
    n_train = sum(f["split"] == "train" for f in manifest.frames)
    print(f"wrote {len(manifest.frames)} frames ({n_train} train / {len(manifest.frames) - n_train} test), "
          f"{cfg.scene.size}x{cfg.scene.size}, delta_dim {manifest.delta_dim} -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .trainer import NumericAbort, build_state, train

    dataset = load_dataset(args.data)
    if args.resume:
        state = _load_state(args.resume)
        cfg = state.config
        print("resolved config:", cfg.to_json(), flush=True)
        iters = args.iters if args.iters is not None else cfg.train.iterations
    else:
        extra = []
        if args.no_gat:
            extra.append("field.use_gat=false")
        if args.no_latent:
            extra.append("field.use_latent=false")
        if args.iters is not None:
            extra.append(f"train.iterations={args.iters}")
        if args.seed is not None:
            extra.append(f"train.seed={args.seed}")
        cfg = _config(args, extra)
        state = None
        iters = cfg.train.iterations
    if cfg.field.delta_dim != dataset.manifest.delta_dim:
        raise CliError(f"dataset has {dataset.manifest.delta_dim}-dim expressions, config expects "
                       f"{cfg.field.delta_dim}", EXIT_CONFIG)
    if state is None:
        state = build_state(cfg, [f.index for f in dataset.train])
    print(f"training {cfg.field.ablation} from iteration {state.iteration} to {iters}", flush=True)
    try:
        state, rows = train(dataset, out_dir=args.out, state=state, iterations=iters, threads=_threads(args))
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = [r for r in rows if r[2] != ""]
    if last:
        it, loss, p, s, e = last[-1]
        print(f"iter {it}: psnr {p:.2f} ssim {s:.4f} l1 {e:.4f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.gatn')}")
    return EXIT_OK


def cmd_render(args):
    from .trainer import render_frame, render_view

    state = _load_state(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_delta_dim(state, dataset)
    frames = _frames_for(dataset, args.split, args.frames)
    overrides = _parse_delta_overrides(args.delta, dataset.manifest.delta_dim)
    source = None
    if args.novel_expression is not None:
        try:
            source = dataset.frame(args.novel_expression)
        except KeyError:
            raise CliError(f"unknown frame {args.novel_expression} for --novel-expression", EXIT_CONFIG) from None
    scene = scene_spec_from_manifest(dataset.manifest)
    if args.novel_pose and scene is None:
        raise CliError("--novel-pose needs the scene block of a synthetic manifest", EXIT_CONFIG)
    os.makedirs(args.out, exist_ok=True)
    threads = _threads(args)
    m = dataset.manifest
    for f in frames:
        delta = np.array(source.delta if source is not None else f.delta, dtype=np.float64)
        for k, v in overrides.items():
            delta[k] = v
        gamma = _gamma_for(state, f, args.gamma)
        if args.novel_pose:
            for az in args.novel_pose:
                cam = orbit_camera(scene, 0, azimuth_deg=az)
                img = render_view(state, cam, delta, gamma, m.t_near, m.t_far, threads=threads)
                save_png(os.path.join(args.out, f"frame_{f.index:05d}_az{az:+07.2f}.png"), img)
        else:
            img = render_frame(state, f, m, gamma=gamma, delta=delta, threads=threads)
            save_png(os.path.join(args.out, f"frame_{f.index:05d}.png"), img)
    print(f"rendered {len(frames)} frame(s) -> {args.out}")
    return EXIT_OK


def cmd_reenact(args):
    from .trainer import render_view

    state = _load_state(args.checkpoint)
    driver = load_dataset(args.drive)
    _check_delta_dim(state, driver)
    cam_frame = None
    if args.fixed_camera is not None:
        try:
            cam_frame = driver.frame(args.fixed_camera)
        except KeyError:
            raise CliError(f"unknown frame {args.fixed_camera} for --fixed-camera", EXIT_CONFIG) from None
    gamma = _gamma_for(state, None, "mean")
    os.makedirs(args.out, exist_ok=True)
    m = driver.manifest
    frames = sorted(driver.frames, key=lambda f: f.index)
    for f in frames:
        cam = (cam_frame or f).camera
        img = render_view(state, cam, f.delta, gamma, m.t_near, m.t_far, threads=_threads(args))
        save_png(os.path.join(args.out, f"frame_{f.index:05d}.png"), img)
    print(f"reenacted {len(frames)} frame(s) -> {args.out}")
    return EXIT_OK


def evaluate_checkpoint(state, dataset, frames, threads=1, label=None):
    """Metric report of quantized renders against the frames' images."""
    from .trainer import render_frame

    report = MetricReport(label=label or state.config.field.ablation)
    for f in frames:
        pred = quantize(render_frame(state, f, dataset.manifest, threads=threads)) / 255.0
        report.add(f.index, pred, f.image, box=f.box)
    return report


def ablation_table(reports):
    """Comparison of mean metrics, one row per configuration."""
    lines = [f"{'method':<12} {'L1':>8} {'PSNR':>8} {'SSIM':>8} {'LPIPS':>8}"]
    for r in reports:
        lines.append(f"{r.label:<12} {r.mean('l1'):>8.4f} {r.mean('psnr'):>8.3f} {r.mean('ssim'):>8.4f} {'n/a':>8}")
    return "\n".join(lines)


def cmd_eval(args):
    dataset = load_dataset(args.data)
    frames = _frames_for(dataset, args.split, args.frames)
    reports = []
    for path in args.checkpoint:
        state = _load_state(path)
        _check_delta_dim(state, dataset)
        reports.append(evaluate_checkpoint(state, dataset, frames, threads=_threads(args)))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    for rep in reports:
        print(f"== {rep.label} ({args.split} split)")
        print(rep.table())
        if args.out:
            name = rep.label.replace("/", "")  # "w/o-GAT" -> "wo-GAT"
            with open(os.path.join(args.out, f"report_{name}.csv"), "w") as fh:
                fh.write(rep.to_csv())
    if len(reports) > 1:
        table = ablation_table(reports)
        print(table)
        if args.out:
            with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
                fh.write(table + "\n")
    return EXIT_OK


def _scale_grads(factor):
    return lambda grads: tuple(None if g is None else g * factor for g in grads)


def cmd_gradcheck(args):
    from . import checks
    from . import diffcore as dc

    ctx = dc.fault_injection(args.corrupt, _scale_grads(1.5)) if args.corrupt else contextlib.nullcontext()
    with ctx, dc.default_dtype(np.float64):
        results = checks.run_suite(n_coords=args.coords, preset=args.preset, seed=args.seed)
    print(checks.format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed (tolerance {checks.TOLERANCE:g})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="gatnerf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the procedural dynamic scene to a dataset directory")
    _add_config_flags(p, default_preset="desk")
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit coarse/fine fields and latent codes")
    p.add_argument("data")
    _add_config_flags(p)
    p.add_argument("--iters", type=int, help="total iteration count")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-gat", action="store_true", help="ablation: replace the encoder with its input projection")
    p.add_argument("--no-latent", action="store_true", help="ablation: freeze latent codes at zero")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--frames", help="comma-separated frame indices")
    p.add_argument("--gamma", choices=("trained", "mean", "zero"), default="trained",
                   help="latent code: the frame's own (unseen frames get the mean), the mean, or zeros")
    p.add_argument("--novel-expression", type=int, metavar="FRAME", help="use the expression vector of FRAME")
    p.add_argument("--delta", action="append", metavar="INDEX=VALUE", help="override one expression component")
    p.add_argument("--novel-pose", type=float, action="append", metavar="AZIMUTH",
                   help="render from the orbit camera at this azimuth in degrees (repeatable)")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reenact", help="drive a trained model with another dataset's expression sequence")
    p.add_argument("checkpoint")
    p.add_argument("--drive", required=True, metavar="DATASET")
    p.add_argument("--fixed-camera", type=int, metavar="FRAME", help="render every frame from FRAME's camera")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_reenact)

    p = sub.add_parser("eval", help="L1/PSNR/SSIM of renders against dataset images")
    p.add_argument("data")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="repeat to compare configurations side by side")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--frames", help="comma-separated frame indices")
    p.add_argument("-o", "--out", help="directory for CSV reports")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full network")
    p.add_argument("--preset", default="desk")
    p.add_argument("--coords", type=int, default=100, help="sampled network coordinates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", metavar="OP", help="scale OP's adjoint by 1.5 (checker self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ckpt.CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
