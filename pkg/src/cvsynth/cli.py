"""``cvsynth`` command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Set ``CVS_THREADS`` to cap the number of torch worker threads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


def _shape(text: str):
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected HxWxL") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected three positive sizes HxWxL")
    return dims


def _positive_int(text: str):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _echo(command: str, seed, config: dict):
    print(json.dumps({"command": command, "seed": seed, "config": config}, sort_keys=True), flush=True)


def _read(path):
    from .volume import VolumeFormatError, read_volume

    try:
        return read_volume(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except VolumeFormatError as exc:
        raise DataError(str(exc)) from None


def cmd_gen_phantom(args):
    from .volume import make_phantom, write_volume

    _echo("gen-phantom", args.seed, {"kind": args.kind, "shape": list(args.shape), "max_z_freq": args.max_z_freq})
    v = make_phantom(args.kind, args.shape, seed=args.seed, max_z_freq=args.max_z_freq)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_volume(v, args.out)
    print(f"wrote {args.out}")


def cmd_degrade(args):
    from .volume import DegradationSpec, degrade, write_volume

    spec = DegradationSpec(mode=args.mode, factor=args.r, blur_sigma=args.blur_sigma,
                           noise_sigma=args.noise_sigma, seed=args.seed)
    resolved = {"mode": spec.mode, "factor": spec.factor}
    if spec.mode == "blur_noise":
        resolved.update(blur_sigma=spec.effective_blur_sigma, noise_sigma=spec.noise_sigma)
    _echo("degrade", args.seed, resolved)
    v = _read(args.input)
    try:
        out = degrade(v, spec)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_volume(out, args.out)
    print(f"wrote {args.out} with shape {out.shape}")


TRAIN_OVERRIDES = ("r", "gamma", "N", "m", "epochs", "stage1_epochs", "steps_per_epoch", "batch_size",
                   "lr", "patch", "seed")


def resolve_train_config(args):
    from .training import TrainConfig

    base = {}
    if args.resume and not args.config:
        from .checkpoint import load_tensors

        try:
            base = load_tensors(args.resume)[0]["config"]
        except FileNotFoundError:
            raise DataError(f"no such checkpoint: {args.resume}") from None
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"no such config file: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    for key in TRAIN_OVERRIDES:
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    if args.epochs is not None and "stage1_epochs" not in base and args.epochs > 0:
        base["stage1_epochs"] = min(base.get("stage1_epochs", TrainConfig.stage1_epochs), args.epochs)
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_train(args):
    from .training import TrainingDivergedError, train

    cfg = resolve_train_config(args)
    _echo("train", cfg.seed, cfg.to_dict())
    data = Path(args.data)
    files = sorted(data.glob("*.cvol")) if data.is_dir() else []
    if not files:
        raise DataError(f"no .cvol volumes found in {data}")
    volumes = [_read(f) for f in files]
    try:
        result = train(cfg, volumes, out_dir=args.out, resume=args.resume, on_step=_print_step if args.verbose else None)
    except TrainingDivergedError as exc:
        raise NumericError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if result.history:
        last = result.history[-1]
        print(f"finished step {last['step']} (epoch {last['epoch']}), total loss {last['total']:.6g}")
    print(f"checkpoint {result.checkpoint}")


def _print_step(entry):
    print(f"epoch {entry['epoch']:3d} step {entry['step']:5d} stage {entry['stage']} "
          f"loss {entry['total']:.6g} lr {entry['lr']:.1e}", flush=True)


def cmd_infer(args):
    from .checkpoint import CheckpointError
    from .training import infer, load_checkpoint
    from .volume import write_volume

    try:
        models, cfg, _, meta = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise DataError(f"no such checkpoint: {args.ckpt}") from None
    except (CheckpointError, ValueError) as exc:
        raise DataError(str(exc)) from None
    _echo("infer", cfg.seed, {"r": cfg.r, "fuse": args.fuse, "passes": args.passes, "view": args.view,
                              "checkpoint_step": meta.get("step")})
    v = _read(args.input)
    try:
        out = infer(models, v, r=args.r, do_fuse=args.fuse, passes=args.passes,
                    include_axial_at_originals=cfg.fusion_include_axial_at_originals)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    view = "fused" if args.fuse and args.view is None else (args.view or "axial")
    result = getattr(out, view)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_volume(result, args.out)
    print(f"wrote {view} volume {result.shape} to {args.out}")


def cmd_evaluate(args):
    from .metrics import dump_pngs, evaluate

    _echo("evaluate", None, {"pred": args.pred, "gt": args.gt, "lr": args.lr, "r": args.r, "png": args.png})
    pred, gt = _read(args.pred), _read(args.gt)
    lr = _read(args.lr) if args.lr else None
    if lr is not None and args.r is None:
        raise UsageError("--lr needs --r")
    try:
        report = evaluate(pred, gt, lr=lr, r=args.r)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(report.to_dict(), indent=2)
    out.write_text(text + "\n")
    print(text)
    if args.png:
        dump_pngs(pred, out.parent / f"{out.stem}_slices")


def cmd_gradcheck(args):
    from . import gradsuite

    _echo("gradcheck", 0, {"full": args.full})
    results = gradsuite.run(full=args.full)
    print(gradsuite.format_table(results))
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    from .volume import DEGRADATION_MODES, PHANTOM_KINDS

    parser = argparse.ArgumentParser(prog="cvsynth", description="Self-supervised CT slice interpolation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a procedural phantom volume")
    p.add_argument("--kind", choices=PHANTOM_KINDS, required=True)
    p.add_argument("--shape", type=_shape, required=True, help="HxWxL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-z-freq", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("degrade", help="build a low-resolution volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--r", type=_positive_int, required=True)
    p.add_argument("--mode", choices=DEGRADATION_MODES, default="direct_subsample")
    p.add_argument("--blur-sigma", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="two-stage self-supervised training")
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--data", required=True, help="directory of .cvol training volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--r", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--N", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="print every step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="upsample a volume along z")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--r", type=_positive_int)
    p.add_argument("--fuse", action="store_true", help="write the fused volume")
    p.add_argument("--view", choices=("axial", "coronal", "sagittal", "fused"))
    p.add_argument("--passes", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--lr", help="low-resolution input, enables baseline scores")
    p.add_argument("--r", type=_positive_int)
    p.add_argument("--png", action="store_true", help="also dump predicted slices as PNG")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--full", action="store_true", help="include the tiny full networks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = os.environ.get("CVS_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        args.func(args)
    except UsageError as exc:
        print(f"cvsynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cvsynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"cvsynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
