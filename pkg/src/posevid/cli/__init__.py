"""Command-line front end.

One binary, eight subcommands covering the pipeline (gen-data, pretrain,
finetune, train-face, synthesize, enhance, evaluate) plus verify, which
runs fast self-contained oracle suites. Every command writes its artifacts
under --out together with a manifest.json recording the full configuration,
so any run can be reproduced from its run directory alone.

Exit codes: 0 success, 2 validation error (bad config, malformed input
file), 1 runtime error. Logs go to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import __version__
from ..metrics import (EvalReport, flicker, frame_features,
                       frechet_features, joint_error, psnr)
from ..model import BODY, FACE, init_params
from ..rng import ORACLE, Rng, derive_stream
from ..schedule import (build_schedule, ddim_step, ddim_timesteps, ddpm_step,
                        gaussian_oracle)
from ..temporal import generate_sequence, plan_windows
from ..enhance import enhance_sequence
from ..training import (TrainConfig, build_face_corpus, finetune, pretrain,
                        train_face, write_loss_csv)
from ..world import sample_identity, sample_pose_sequence, build_clip
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, emit_config, parse_config
from . import io

log = logging.getLogger("posevid")


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ValueError(f"missing required path(s): {', '.join(missing)}")


def _outdir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": emit_config(cfg),
        "seed": cfg.seed,
        "version": f"posevid-{__version__}",
    }
    io.write_json(out / "manifest.json", manifest)
    return out


def _sched(cfg: RunConfig):
    return build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _dataset(cfg: RunConfig) -> dict:
    return io.read_json(Path(cfg.data) / "dataset.json")


def _train_clips(cfg: RunConfig):
    ds = _dataset(cfg)
    return [io.load_clip(Path(cfg.data) / rel) for rel in ds["train"]]


def _target_clip(cfg: RunConfig):
    return io.load_clip(Path(cfg.data) / _dataset(cfg)["target"])


def _holdout(cfg: RunConfig):
    ds = _dataset(cfg)
    out = []
    for j, rel in enumerate(ds["holdout"]):
        d = Path(cfg.data) / rel
        poses = io.poses_from_list(io.read_json(d / "poses.json")["poses"])
        out.append((j, rel, poses, d))
    return out


# --------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: RunConfig) -> None:
    _require(cfg, "out")
    out = _outdir(cfg, "gen-data")
    rng = Rng(cfg.seed)
    train_dirs = []
    # identities 0..identities-1 pretrain the shared model; the extra one is
    # the fine-tune target whose appearance the pipeline binds to.
    target = None
    for k in range(cfg.identities + 1):
        target = sample_identity(rng, key=k)
        poses = sample_pose_sequence(rng, cfg.clip_frames, key=k)
        rel = f"clips/{k:03d}"
        io.save_clip(out / rel, build_clip(target, poses))
        train_dirs.append(rel)
        log.info("rendered clip %s (%d frames)", rel, cfg.clip_frames)
    target_rel = train_dirs.pop()

    holdout = []
    for j in range(cfg.holdout_sequences):
        poses = sample_pose_sequence(rng, cfg.holdout_frames, key=1000 + j)
        rel = f"holdout/{j:03d}"
        io.save_clip(out / rel, build_clip(target, poses))
        holdout.append(rel)
        log.info("rendered holdout %s (%d frames)", rel, cfg.holdout_frames)

    io.write_json(out / "dataset.json", {
        "train": train_dirs,
        "target": target_rel,
        "holdout": holdout,
    })


def cmd_pretrain(cfg: RunConfig) -> None:
    _require(cfg, "data", "out")
    out = _outdir(cfg, "pretrain")
    clips = _train_clips(cfg)
    sched = _sched(cfg)
    model = init_params(Rng(cfg.seed), BODY)
    tc = TrainConfig("pretrain", cfg.pretrain_steps, cfg.batch_size,
                     cfg.learning_rate, cfg.cond_dropout,
                     cfg.perturb_magnitude, cfg.seed)
    model, curve = pretrain(clips, model, tc, sched)
    save_checkpoint(model, sched, out / "model.ckpt",
                    {"stage": "pretrain", "steps": cfg.pretrain_steps,
                     "final_loss": curve[-1][1]})
    write_loss_csv(out / "loss.csv", curve)
    log.info("pretrain done, final loss %.4f", curve[-1][1])


def cmd_finetune(cfg: RunConfig) -> None:
    _require(cfg, "data", "checkpoint", "out")
    out = _outdir(cfg, "finetune")
    model, sched = load_checkpoint(cfg.checkpoint)
    tc = TrainConfig("finetune", cfg.finetune_steps, cfg.batch_size,
                     cfg.learning_rate, cfg.cond_dropout,
                     cfg.perturb_magnitude, cfg.seed)
    model, curve = finetune(model, [_target_clip(cfg)], tc, sched)
    save_checkpoint(model, sched, out / "model.ckpt",
                    {"stage": "finetune", "steps": cfg.finetune_steps,
                     "final_loss": curve[-1][1]})
    write_loss_csv(out / "loss.csv", curve)
    log.info("finetune done, final loss %.4f", curve[-1][1])


def cmd_train_face(cfg: RunConfig) -> None:
    _require(cfg, "data", "out")
    out = _outdir(cfg, "train-face")
    corpus = build_face_corpus([_target_clip(cfg)])
    sched = _sched(cfg)
    model = init_params(Rng(cfg.seed + 1), FACE)
    # The enhancement sampler never applies guidance or pose jitter, so the
    # face stage trains without dropout or perturbation.
    tc = TrainConfig("face", cfg.face_steps, cfg.batch_size,
                     cfg.learning_rate, cond_dropout=0.0,
                     perturb_magnitude=0.0, seed=cfg.seed)
    model, curve = train_face(model, corpus, tc, sched)
    save_checkpoint(model, sched, out / "face.ckpt",
                    {"stage": "face", "steps": cfg.face_steps,
                     "final_loss": curve[-1][1]})
    write_loss_csv(out / "loss.csv", curve)
    log.info("face training done, final loss %.4f", curve[-1][1])


def cmd_synthesize(cfg: RunConfig) -> None:
    _require(cfg, "data", "checkpoint", "out")
    out = _outdir(cfg, "synthesize")
    model, sched = load_checkpoint(cfg.checkpoint)
    ref = _target_clip(cfg).frames[0]
    for j, rel, poses, _ in _holdout(cfg):
        frames = generate_sequence(
            poses, ref, model, sched, steps=cfg.steps, cfg_scale=cfg.cfg,
            ws=cfg.ws, os=cfg.os, seed=derive_stream(cfg.seed, j),
            w_c=cfg.w_c, sampler=cfg.sampler)
        io.save_frames(out / rel / "frames", frames)
        log.info("synthesized %s (%d frames)", rel, len(frames))


def cmd_enhance(cfg: RunConfig) -> None:
    _require(cfg, "data", "checkpoint", "frames", "out")
    out = _outdir(cfg, "enhance")
    face, sched = load_checkpoint(cfg.checkpoint)
    identity = _target_clip(cfg).identity
    for j, rel, poses, _ in _holdout(cfg):
        frames = io.load_frames(Path(cfg.frames) / rel / "frames")
        enhanced = enhance_sequence(
            frames, poses, identity, face, sched, steps=cfg.enhance_steps,
            seed=derive_stream(cfg.seed, j), w_c=cfg.w_c)
        io.save_frames(out / rel / "frames", enhanced)
        log.info("enhanced %s (%d frames)", rel, len(frames))


def cmd_evaluate(cfg: RunConfig) -> None:
    _require(cfg, "data", "frames", "out")
    out = _outdir(cfg, "evaluate")
    identity = _target_clip(cfg).identity
    per_seq = []
    gen_all, gt_all = [], []
    for _, rel, poses, gt_dir in _holdout(cfg):
        gen = io.load_frames(Path(cfg.frames) / rel / "frames")
        gt = io.load_frames(gt_dir / "frames")
        entry = {
            "sequence": rel,
            "joint_error_px": joint_error(gen, poses, identity),
            "flicker": flicker(gen),
            "psnr_db": float(np.mean([psnr(a, b)
                                      for a, b in zip(gen, gt)])),
        }
        per_seq.append(entry)
        gen_all.append(gen)
        gt_all.append(gt)
        log.info("evaluated %s: joint %.3f px", rel, entry["joint_error_px"])
    gen_all = np.concatenate(gen_all)
    gt_all = np.concatenate(gt_all)
    report = EvalReport(
        joint_error_px=float(np.mean([e["joint_error_px"] for e in per_seq])),
        flicker=float(np.mean([e["flicker"] for e in per_seq])),
        frechet=frechet_features(frame_features(gen_all),
                                 frame_features(gt_all)),
        psnr_db=float(np.mean([e["psnr_db"] for e in per_seq])),
        per_sequence=per_seq,
    )
    io.write_json(out / "metrics.json", report.as_dict())
    log.info("joint %.3f px, flicker %.6f, frechet %.4f",
             report.joint_error_px, report.flicker, report.frechet)


# --------------------------------------------------------------------------
# verify: oracle suites runnable without any artifacts


def _verify_grads() -> list[str]:
    from ..tensor import (Tensor, add, attention, avg_pool2, concat, conv2d,
                          div, grad_check, group_norm, linear, matmul,
                          mean_op, mse, mul, reshape, scale, silu, softmax,
                          split_rows, sqrt, sub, sum_op, transpose,
                          upsample_nearest2)

    failures = []
    g = np.random.Generator(np.random.Philox(key=[7, ORACLE]))

    def t(*shape, positive=False):
        a = g.standard_normal(shape)
        return Tensor(np.abs(a) + 0.5 if positive else a, dtype=np.float64)

    x, y = t(3, 4), t(3, 4)
    q, k, v = t(3, 5), t(4, 5), t(4, 6)
    img = t(2, 4, 6, 6)
    w3 = t(3, 4, 3, 3)
    b3 = t(3)
    gam, bet = t(4), t(4)
    lw, lb = t(4, 5), t(5)
    pos = t(3, 4, positive=True)

    cases = {
        "add": (lambda: mean_op(add(x, y)), [x, y]),
        "sub": (lambda: mean_op(sub(x, y)), [x, y]),
        "mul": (lambda: mean_op(mul(x, y)), [x, y]),
        "div": (lambda: mean_op(div(x, pos)), [x, pos]),
        "scale": (lambda: mean_op(scale(x, 1.7)), [x]),
        "sqrt": (lambda: mean_op(sqrt(pos)), [pos]),
        "silu": (lambda: mean_op(silu(x)), [x]),
        "matmul": (lambda: mean_op(matmul(q, transpose(k))), [q, k]),
        "sum": (lambda: sum_op(mul(x, x)), [x]),
        "mean": (lambda: mean_op(mul(x, x)), [x]),
        "reshape": (lambda: mean_op(mul(reshape(x, (4, 3)),
                                        reshape(y, (4, 3)))), [x, y]),
        "transpose": (lambda: mean_op(mul(transpose(x), transpose(y))),
                      [x, y]),
        "concat": (lambda: mean_op(mul(concat([x, y], 0),
                                       concat([y, x], 0))), [x, y]),
        "split": (lambda: mean_op(split_rows(x, 3)[1]), [x]),
        "softmax": (lambda: mean_op(mul(softmax(x), y)), [x, y]),
        "attention": (lambda: mean_op(attention(q, k, v)), [q, k, v]),
        "conv2d": (lambda: mean_op(conv2d(img, w3, b3, 1, 1)),
                   [img, w3, b3]),
        "avg_pool2": (lambda: mean_op(mul(avg_pool2(img), avg_pool2(img))),
                      [img]),
        "upsample": (lambda: mean_op(mul(upsample_nearest2(img),
                                         upsample_nearest2(img))), [img]),
        "linear": (lambda: mean_op(linear(x, lw, lb)), [x, lw, lb]),
        "group_norm": (lambda: mean_op(mul(group_norm(img, gam, bet, 2), img)),
                       [img, gam, bet]),
        "mse": (lambda: mse(x, y), [x, y]),
    }
    for name, (f, params) in cases.items():
        err = grad_check(f, params, h=1e-5)
        if err > 1e-4:
            failures.append(f"grad {name}: rel err {err:.2e} > 1e-4")
    return failures


def _verify_sampler() -> list[str]:
    # T=50 with betas up to 0.05 keeps both endpoints honest: the chain ends
    # close enough to pure noise that starting from N(0, 1) is right, and 20
    # DDIM steps stay within the moment tolerances (coarser slices of a near
    # flat-variance schedule contract the endpoint spread; see tests).
    sched = build_schedule(50, 0.005, 0.05)
    mu, var = 0.3, 0.04
    n = 5000
    rng = Rng(123)
    failures = []
    # Chains run vectorized and share one noise stream per timestep; for a
    # moment check only the per-chain independence of draws matters.
    x = rng.normal(derive_stream(ORACLE, 0), (n,), dtype=np.float64)
    for t in range(sched.T, 0, -1):
        eps = gaussian_oracle(x, t, mu, var, sched)
        x = ddpm_step(x, eps, t, sched, rng, derive_stream(ORACLE, 1, t))
    y = rng.normal(derive_stream(ORACLE, 2), (n,), dtype=np.float64)
    for t, t_prev in ddim_timesteps(sched.T, 20):
        eps = gaussian_oracle(y, t, mu, var, sched)
        y = ddim_step(y, eps, t, t_prev, sched)
    for name, end in (("ddpm", x), ("ddim", y)):
        mean_err = abs(float(np.mean(end)) - mu)
        var_ratio = float(np.var(end)) / var
        if mean_err >= 0.05:
            failures.append(f"{name} mean err {mean_err:.4f} >= 0.05")
        if abs(var_ratio - 1.0) >= 0.1:
            failures.append(f"{name} var ratio {var_ratio:.4f} off by >= 0.1")
    return failures


def _verify_windows() -> list[str]:
    failures = []
    for n in range(1, 33):
        for ws in range(1, min(n, 10) + 1):
            for os_ in range(0, ws):
                plan = plan_windows(n, ws, os_)
                seen = np.zeros(n, dtype=np.int64)
                prev = -1
                for wb, we in plan.windows:
                    if we - wb != ws or wb < 0 or we > n or wb <= prev:
                        failures.append(
                            f"bad window {(wb, we)} for {(n, ws, os_)}")
                    prev = wb
                    seen[wb:we] += 1
                if (seen < 1).any() or (seen != plan.counts).any():
                    failures.append(f"coverage broken for {(n, ws, os_)}")
                if failures:
                    return failures
    return failures


def cmd_verify(cfg: RunConfig) -> None:
    suites = (("gradients", _verify_grads),
              ("sampler-oracle", _verify_sampler),
              ("window-plans", _verify_windows))
    bad = []
    for name, fn in suites:
        problems = fn()
        log.info("verify %s: %s", name, "ok" if not problems else "FAILED")
        bad.extend(problems)
    if bad:
        raise RuntimeError("; ".join(bad))


# --------------------------------------------------------------------------
# Argument handling

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-face": cmd_train_face,
    "synthesize": cmd_synthesize,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
}


def _add_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            sub.add_argument(flag, action="store_const", const=True,
                             default=None)
        else:
            sub.add_argument(flag, default=None)


_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type == "int"}
_FLOAT_FIELDS = {f.name for f in fields(RunConfig) if f.type == "float"}


def _coerce(name: str, value):
    if isinstance(value, str):
        if name in _INT_FIELDS:
            return int(value)
        if name in _FLOAT_FIELDS:
            return float(value)
    return value


def _build_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    if args.config:
        data.update(emit_config(parse_config(args.config)))
    for f in fields(RunConfig):
        v = getattr(args, f.name.replace("-", "_"), None)
        if v is not None:
            data[f.name] = _coerce(f.name, v)
    return parse_config(data)


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="posevid",
        description="pose-conditioned diffusion video pipeline")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        _add_flags(subs.add_parser(name))
    args = parser.parse_args(argv)

    try:
        cfg = _build_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        log.error("invalid configuration: %s", e)
        return 2
    try:
        _COMMANDS[args.command](cfg)
    except (ValueError, OSError) as e:
        # Covers validation failures on inputs: missing paths, malformed
        # images, corrupt checkpoints (CheckpointError is a ValueError).
        log.error("%s", e)
        return 2
    except Exception as e:
        log.error("runtime failure: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
