"""Command-line entry point: data generation, training, inference, masks, evaluation, replay."""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _thread_limit():
    raw = os.environ.get("UNIPAINT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"UNIPAINT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("UNIPAINT_THREADS must be >= 1")
    return n


@contextmanager
def _threads(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _manifest_path(out, is_dir):
    out = Path(out)
    return out / RUN_MANIFEST if is_dir else out.with_name(out.name + ".manifest.json")


def write_run_manifest(path, command, argv, config, outputs, seed=None, checkpoints=None):
    manifest = {
        "tool": "unipaint",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "seed": seed,
        "threads": os.environ.get("UNIPAINT_THREADS"),
        "config": config,
        "checkpoints": checkpoints or [],
        "outputs": [str(o) for o in outputs],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def _read_video(path, what):
    from .numerics.uptn import UPTNError, read_tensor

    try:
        arr = read_tensor(path)
    except FileNotFoundError:
        raise DataError(f"{what} file not found: {path}") from None
    except UPTNError as exc:
        raise DataError(f"{what} file {path} is not a valid tensor: {exc}") from None
    if arr.ndim != 4:
        raise DataError(f"{what} {path} must be [F, C, H, W], got shape {arr.shape}")
    return arr


def _prompt(name):
    from .synthdata import prompt_by_name, vocabulary_listing

    try:
        return prompt_by_name(name)
    except KeyError:
        raise UsageError(f"unknown prompt {name!r}; choose 'null' or one of: {vocabulary_listing()}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, argv):
    from .numerics import RandomStream
    from .synthdata import ClipConfig, gen_dataset, save_dataset

    if args.clips < 1:
        raise UsageError("--clips must be >= 1")
    H, W = args.size
    cfg = ClipConfig(frames=args.frames, height=H, width=W)
    try:
        clips = gen_dataset(args.clips, cfg, RandomStream(args.seed).spawn("data"), motion=args.motion)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        save_dataset(clips, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from None
    config = {"clips": args.clips, "frames": args.frames, "size": [H, W], "motion": args.motion}
    write_run_manifest(_manifest_path(out, True), "gen-data", argv, config, [out], seed=args.seed)
    print(f"wrote {len(clips)} clips to {out}")


POLICIES = ("mixed", "spatial", "temporal")


def _policy(name):
    from .maskgen import MixedMaskPolicy

    return {"mixed": MixedMaskPolicy(), "spatial": MixedMaskPolicy.spatial_only(), "temporal": MixedMaskPolicy.temporal_only()}[name]


def cmd_train(args, argv):
    from .model import Denoiser, ModelConfig, load_checkpoint, save_checkpoint
    from .synthdata import load_dataset
    from .trainer import DEFAULT_LR, TrainConfig, Trainer

    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 needs a stage-1 checkpoint via --init")
    try:
        clips = load_dataset(args.data)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read dataset {args.data}: {exc}") from None
    if args.init:
        try:
            model = load_checkpoint(args.init)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from None
    else:
        probe = ModelConfig(widths=tuple(args.widths), injection_sites=())
        sites = tuple(s for s in ModelConfig.injection_sites if s in probe.valid_sites())
        model = Denoiser(ModelConfig(widths=tuple(args.widths), injection_sites=sites, seed=args.seed))
    lr = DEFAULT_LR[args.stage] if args.lr is None else args.lr
    tcfg = TrainConfig(
        stage=args.stage,
        learning_rate=lr,
        steps=args.steps,
        batch=args.batch,
        policy=_policy(args.policy),
        seed=args.seed,
        timesteps=args.timesteps,
        lr_schedule=args.lr_schedule,
        warmup_steps=args.warmup,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "train_log.csv"
    if log.exists():
        log.unlink()
    trainer = Trainer(model, clips, tcfg)
    ckpts = []

    def note(tr, res):
        if args.checkpoint_every and tr.step_index % args.checkpoint_every == 0:
            ckpts.append(str(out / "checkpoints" / f"step_{tr.step_index:06d}"))

    trainer.run(log_path=log, checkpoint_dir=out / "checkpoints", checkpoint_every=args.checkpoint_every, callback=note)
    save_checkpoint(model, out, args.stage, extra={"timesteps": args.timesteps})
    config = {
        "stage": args.stage,
        "learning_rate": lr,
        "lr_schedule": args.lr_schedule,
        "warmup_steps": args.warmup,
        "steps": args.steps,
        "batch": args.batch,
        "policy": args.policy,
        "timesteps": args.timesteps,
        "widths": list(model.config.widths),
        "init": args.init,
        "data": args.data,
    }
    write_run_manifest(_manifest_path(out, True), "train", argv, config, [out, log], seed=args.seed, checkpoints=ckpts + [str(out)])
    losses = [r.loss for r in trainer.history]
    if losses:
        print(f"stage {args.stage}: {len(losses)} steps, lr {lr:g}, final loss {losses[-1]:.5f}")


def cmd_infer(args, argv):
    from .diffusion import build_schedule
    from .maskgen import interpolation_keyframes, make_interpolation_mask, make_marginal_mask
    from .model import load_checkpoint
    from .numerics import RandomStream
    from .numerics.uptn import write_tensor
    from .sampler import DESK_SCALE_STEPS, FULL_SCALE_STEPS, SamplerConfig, sample_inpaint, write_ppm_frames

    prompt = _prompt(args.prompt)
    try:
        model = load_checkpoint(args.ckpt)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    manifest = json.loads((Path(args.ckpt) / "manifest.json").read_text())
    T = int(manifest.get("extra", {}).get("timesteps", 1000))
    video = _read_video(args.video, "video")
    F, _, H, W = video.shape
    if args.task == "inpaint":
        if not args.mask:
            raise UsageError("inpaint needs --mask")
        mask = _read_video(args.mask, "mask")
        if mask.shape != (F, 1, H, W):
            raise DataError(f"mask {args.mask} has shape {mask.shape}; video {args.video} needs {(F, 1, H, W)}")
    elif args.task == "outpaint":
        border = args.border if args.border is not None else None
        try:
            mask = make_marginal_mask(F, H, W, border)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        try:
            keys = interpolation_keyframes(args.keyframes)
            mask = make_interpolation_mask(F, H, W, keys)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    steps = args.steps if args.steps is not None else (FULL_SCALE_STEPS if args.scale == "full" else DESK_SCALE_STEPS)
    scfg = SamplerConfig(
        steps=steps,
        cfg_scale=args.cfg,
        omega_s=args.omega_s,
        eta=args.eta,
        final_composite=not args.no_composite,
        latent_blend=args.latent_blend,
        clip_x0=None if args.no_clip_x0 else 1.0,
    )
    schedule = build_schedule(T)
    try:
        scfg.validate(schedule)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stream = RandomStream(args.seed).spawn("infer")
    out = sample_inpaint(model, video, mask, prompt, scfg, stream, schedule)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("sampling produced non-finite values")
    write_tensor(args.out, out, precision=4)
    outputs = [args.out]
    if args.frames_out:
        outputs += [str(p) for p in write_ppm_frames(out, args.frames_out)]
    synthesized = int(np.sum(np.all(mask > 0, axis=(1, 2, 3))))
    config = {
        "task": args.task,
        "ckpt": args.ckpt,
        "video": args.video,
        "prompt": args.prompt,
        "steps": steps,
        "cfg": args.cfg,
        "omega_s": args.omega_s,
        "eta": args.eta,
        "final_composite": not args.no_composite,
        "latent_blend": args.latent_blend,
        "clip_x0": scfg.clip_x0,
        "timesteps": T,
        "fully_masked_frames": synthesized,
    }
    write_run_manifest(_manifest_path(args.out, False), "infer", argv, config, outputs, seed=args.seed)
    print(f"{args.task}: wrote {args.out} ({synthesized} fully synthesized frame(s))")


def cmd_make_mask(args, argv):
    from .maskgen import (
        interpolation_keyframes,
        make_interpolation_mask,
        make_marginal_mask,
        make_object_mask,
        make_random_mask,
    )
    from .numerics import RandomStream
    from .numerics.uptn import write_tensor

    F = args.frames
    H, W = args.size
    try:
        if args.kind == "object":
            if not args.seg:
                raise UsageError("object masks need --seg")
            seg = _read_video(args.seg, "segmentation")
            mask = make_object_mask(seg, args.dilation)
        elif args.kind == "random":
            mask = make_random_mask(F, H, W, tuple(args.coverage), RandomStream(args.seed).spawn("mask"))
        elif args.kind == "marginal":
            mask = make_marginal_mask(F, H, W, args.border)
        else:
            mask = make_interpolation_mask(F, H, W, interpolation_keyframes(args.keyframes))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_tensor(args.out, mask, precision=4)
    config = {"kind": args.kind, "frames": F, "size": [H, W], "coverage": args.coverage, "border": args.border,
              "keyframes": args.keyframes, "dilation": args.dilation, "seg": args.seg}
    write_run_manifest(_manifest_path(args.out, False), "make-mask", argv, config, [args.out], seed=args.seed)
    print(f"wrote {args.kind} mask {mask.shape} to {args.out}")


def cmd_eval(args, argv):
    from .metrics import evaluate

    ref = _read_video(args.ref, "reference")
    cand = _read_video(args.cand, "candidate")
    mask = _read_video(args.mask, "mask")
    F, _, H, W = ref.shape
    if cand.shape != ref.shape or mask.shape != (F, 1, H, W):
        raise DataError(
            "shape mismatch: "
            f"--ref {args.ref} {ref.shape}; --cand {args.cand} {cand.shape}; --mask {args.mask} {mask.shape} "
            f"(mask must be {(F, 1, H, W)})"
        )
    prompt = _prompt(args.prompt) if args.prompt else None
    try:
        report = evaluate(ref, cand, mask, prompt)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    config = {"ref": args.ref, "cand": args.cand, "mask": args.mask, "prompt": args.prompt}
    write_run_manifest(_manifest_path(args.out, False), "eval", argv, config, [args.out])
    print(report.to_json(), end="")


def cmd_replay(args, argv):
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if manifest.get("tool") != "unipaint" or "argv" not in manifest:
        raise DataError(f"{path} is not a unipaint run manifest")
    replay_argv = manifest["argv"]
    if replay_argv and replay_argv[0] == "replay":
        raise UsageError("refusing to replay a replay manifest")
    cwd = manifest.get("cwd") or os.getcwd()
    prev = os.getcwd()
    os.chdir(cwd)
    try:
        return main(replay_argv)
    finally:
        os.chdir(prev)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

DESK_NOTE = "desk-scale defaults: 20 sampling steps, 8 frames, 32x32; full-scale: 100 steps (--scale full), cfg 12.5"


def build_parser():
    p = _Parser(prog="unipaint", description="Unified space-time video inpainting at desk scale.", epilog=DESK_NOTE)
    p.add_argument("--version", action="version", version=f"unipaint {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic clip corpus", epilog=DESK_NOTE)
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=64)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    g.add_argument("--motion", choices=("linear", "circular"), default=None)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage", epilog="learning-rate defaults: 1e-4 (stage 1), 1e-5 (stage 2)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=None, help="peak learning rate (default 1e-4 for stage 1, 1e-5 for stage 2)")
    t.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    t.add_argument("--warmup", type=int, default=0, help="linear warmup steps")
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--policy", choices=POLICIES, default="mixed")
    t.add_argument("--widths", type=int, nargs="+", default=[32, 64])
    t.add_argument("--timesteps", type=int, default=1000)
    t.add_argument("--init", default=None, help="checkpoint to start from (required for stage 2)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="inpaint, outpaint or interpolate a video", epilog=DESK_NOTE)
    i.add_argument("task", choices=("inpaint", "outpaint", "interpolate"))
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True)
    i.add_argument("--mask", default=None)
    i.add_argument("--border", type=int, default=None)
    i.add_argument("--keyframes", default=None, help="comma-separated keyframe indices, e.g. 0,7")
    i.add_argument("--prompt", default="null", help="vocabulary token such as red-square-linear, or null")
    i.add_argument("--scale", choices=("desk", "full"), default="desk", help="picks the default step count (20 or 100)")
    i.add_argument("--steps", type=int, default=None)
    i.add_argument("--cfg", type=float, default=12.5)
    i.add_argument("--omega-s", type=float, default=1.0)
    i.add_argument("--eta", type=float, default=0.0)
    i.add_argument("--no-composite", action="store_true")
    i.add_argument("--latent-blend", action="store_true")
    i.add_argument("--no-clip-x0", action="store_true", help="do not clamp the clean-latent estimate to [-1, 1]")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.add_argument("--frames-out", default=None)
    i.set_defaults(func=cmd_infer)

    m = sub.add_parser("make-mask", help="write a mask tensor")
    m.add_argument("--kind", choices=("object", "random", "marginal", "interpolation"), required=True)
    m.add_argument("--frames", type=int, default=8)
    m.add_argument("--size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    m.add_argument("--seg", default=None)
    m.add_argument("--dilation", type=int, default=1)
    m.add_argument("--coverage", type=float, nargs=2, default=[0.1, 0.5])
    m.add_argument("--border", type=int, default=None)
    m.add_argument("--keyframes", default="0,7")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_mask)

    e = sub.add_parser("eval", help="score a candidate video against a reference")
    e.add_argument("--ref", required=True)
    e.add_argument("--cand", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--prompt", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="re-run a command from its run manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    from .trainer import NumericalFailure

    try:
        with _threads(_thread_limit()) if args.command != "replay" else nullcontext():
            rc = args.func(args, argv)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        print(f"unipaint: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"unipaint: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"unipaint: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
