"""Two-stage denoiser training plus the face-model stage.

Stage 1 (pretrain) fits one model to many identities with every target
composited onto neutral gray, so appearance has to come from the reference
frame and structure from the condition map rather than from a memorized
background. Stage 2 (finetune) continues from those weights on a single
identity with its real background. The face model trains separately on
clean head crops as an inpainting task; no degraded inputs are needed.

Single-stage ablations fall out of the same entry points: training a fresh
model directly on one identity is finetune() applied to freshly initialized
parameters, and stopping after pretrain() leaves one model shared by all
identities.

All per-step randomness is drawn from counter-based streams keyed by
(stage, step), so runs are bit-reproducible and independent of batch
assembly order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .enhance import crop_face, face_mask, render_face_condition
from .model import Sgdm, denoise_face, encode_appearance, sgdm_forward
from .rng import (TRAIN_BATCH, TRAIN_DROP, TRAIN_NOISE, TRAIN_T, Rng,
                  derive_stream)
from .schedule import NoiseSchedule, eps_loss, q_sample
from .tensor import GradTape, Tensor, concat, reshape
from .world import Clip, perturb_pose, render_condition

GRAY = 0.5        # composite background for stage 1
GRAD_CLIP = 1.0   # global gradient-norm ceiling
TRAIN_W_C = 1.0   # control features enter at unit strength during training

_STAGE_IDS = {"pretrain": 0, "finetune": 1, "face": 2}
DEFAULT_STEPS = {"pretrain": 2000, "finetune": 500, "face": 800}


@dataclass(frozen=True)
class TrainConfig:
    """One training stage's knobs.

    perturb_magnitude jitters the pose before the condition map is rendered
    (never the pose used to render the target), teaching the model to
    tolerate slightly wrong structure inputs. The face stage trains on a
    pre-built corpus and ignores it.
    """

    stage: str
    steps: int
    batch_size: int = 8
    learning_rate: float = 1e-3
    cond_dropout: float = 0.1
    perturb_magnitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.stage not in _STAGE_IDS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")
        if self.perturb_magnitude < 0:
            raise ValueError("perturb_magnitude must be non-negative")


def default_config(stage: str, seed: int = 0) -> TrainConfig:
    """Stage defaults; the face stage disables dropout and perturbation
    because the enhancement sampler never runs guidance."""
    if stage == "face":
        return TrainConfig(stage, DEFAULT_STEPS[stage], cond_dropout=0.0,
                           perturb_magnitude=0.0, seed=seed)
    return TrainConfig(stage, DEFAULT_STEPS[stage], seed=seed)


# --------------------------------------------------------------------------
# Shared pieces


def _clone(model: Sgdm) -> Sgdm:
    return Sgdm(model.cfg, {k: v.copy() for k, v in model.params.items()})


def _gray_composite(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Figure on neutral gray; mask zeros make the result exactly GRAY."""
    return (mask * frame + (1.0 - mask) * np.float32(GRAY)).astype(np.float32)


def _pick_indices(u: np.ndarray, n: int) -> np.ndarray:
    """Map uniforms in [0, 1) to indices in [0, n); the clamp guards the
    half-open boundary against float rounding."""
    return np.minimum((u * n).astype(np.int64), n - 1)


def _sgd_step(tape: GradTape, loss: Tensor, params: dict, lr: float) -> float:
    """One clipped plain-SGD update; returns the pre-clip gradient norm."""
    names = list(params)
    grads = tape.gradients(loss, [params[n] for n in names])
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                          for g in grads))
    scale = lr if total <= GRAD_CLIP else lr * GRAD_CLIP / total
    for name, g in zip(names, grads):
        params[name].data -= scale * g
    return total


def _mixed_tokens(model: Sgdm, refs_kept: np.ndarray, n_drop: int) -> Tensor:
    """Appearance tokens for a batch ordered [kept rows..., dropped rows...].

    Dropped rows read the learned null tokens, the same stand-in the
    guidance path uses at inference, so gradients reach them whenever
    dropout fires.
    """
    parts = []
    if len(refs_kept):
        parts.append(encode_appearance(model, Tensor(refs_kept)))
    if n_drop:
        null = model.params["null_tokens"]
        row = reshape(null, (1, *null.shape))
        parts.extend([row] * n_drop)
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def _noise_batch(x0: np.ndarray, tvec: np.ndarray, eps: np.ndarray,
                 sched: NoiseSchedule) -> np.ndarray:
    return np.stack([q_sample(x0[i], int(tvec[i]), eps[i], sched)
                     for i in range(len(x0))])


# --------------------------------------------------------------------------
# Body stages (pretrain / finetune share one loop)


def _body_batch_loss(model: Sgdm, x0, conds, refs, tvec, eps, drop,
                     sched: NoiseSchedule) -> Tensor:
    # Rows are reordered kept-first; the loss is a mean over elements, so
    # order cannot change its value, only keep (z, t, tokens, cond, eps)
    # aligned.
    order = np.concatenate([np.flatnonzero(~drop), np.flatnonzero(drop)])
    n_keep = int((~drop).sum())
    x0, refs = x0[order], refs[order]
    tvec, eps = tvec[order], eps[order]
    conds = conds[order].copy()
    conds[n_keep:] = 0.0
    z = _noise_batch(x0, tvec, eps, sched)
    tokens = _mixed_tokens(model, refs[:n_keep], len(order) - n_keep)
    pred = sgdm_forward(model, Tensor(z), tvec, tokens, Tensor(conds),
                        TRAIN_W_C, all_frame=False)
    return eps_loss(pred, eps)


def _train_body(clips: Sequence[Clip], model: Sgdm, cfg: TrainConfig,
                sched: NoiseSchedule, composite: bool):
    model = _clone(model)
    rng = Rng(cfg.seed)
    sid = _STAGE_IDS[cfg.stage]
    nb = cfg.batch_size
    c, h, w = clips[0].frames.shape[1:]
    curve = []
    for step in range(1, cfg.steps + 1):
        pick = rng.uniform(derive_stream(TRAIN_BATCH, sid, step), 0.0, 1.0,
                           (nb, 3))
        tvec = rng.integers(derive_stream(TRAIN_T, sid, step), 1,
                            sched.T + 1, (nb,))
        eps = rng.normal(derive_stream(TRAIN_NOISE, sid, step), (nb, c, h, w))
        coins = rng.uniform(derive_stream(TRAIN_DROP, sid, step), 0.0, 1.0,
                            (nb,))
        drop = coins < cfg.cond_dropout

        x0 = np.empty((nb, c, h, w), np.float32)
        refs = np.empty_like(x0)
        conds = np.empty((nb, *clips[0].conds.shape[1:]), np.float32)
        for b in range(nb):
            clip = clips[_pick_indices(pick[b, 0], len(clips))]
            fi = _pick_indices(pick[b, 1], len(clip.frames))
            ri = _pick_indices(pick[b, 2], len(clip.frames))
            if composite:
                x0[b] = _gray_composite(clip.frames[fi], clip.masks[fi])
                refs[b] = _gray_composite(clip.frames[ri], clip.masks[ri])
            else:
                x0[b] = clip.frames[fi]
                refs[b] = clip.frames[ri]
            if cfg.perturb_magnitude > 0:
                jittered = perturb_pose(clip.poses[fi], rng,
                                        cfg.perturb_magnitude,
                                        derive_stream(sid, step, b))
                conds[b] = render_condition(jittered)
            else:
                conds[b] = clip.conds[fi]

        with GradTape() as tape:
            loss = _body_batch_loss(model, x0, conds, refs, tvec, eps, drop,
                                    sched)
        _sgd_step(tape, loss, model.params, cfg.learning_rate)
        curve.append((step, loss.item()))
    return model, curve


def pretrain(clips: Sequence[Clip], model: Sgdm, cfg: TrainConfig,
             sched: NoiseSchedule):
    """Stage 1: many identities, targets composited onto neutral gray.

    Returns (trained model, loss curve); the input model is left untouched.
    """
    if cfg.stage != "pretrain":
        raise ValueError(f"config is for stage {cfg.stage!r}")
    if not clips:
        raise ValueError("empty dataset")
    if len({clip.identity for clip in clips}) < 2:
        raise ValueError("pretraining needs at least two identities")
    return _train_body(clips, model, cfg, sched, composite=True)


def finetune(model: Sgdm, clips: Sequence[Clip], cfg: TrainConfig,
             sched: NoiseSchedule):
    """Stage 2: one identity, real background, every parameter updated."""
    if cfg.stage != "finetune":
        raise ValueError(f"config is for stage {cfg.stage!r}")
    if not clips:
        raise ValueError("empty dataset")
    if len({clip.identity for clip in clips}) != 1:
        raise ValueError("fine-tuning uses exactly one identity")
    return _train_body(clips, model, cfg, sched, composite=False)


# --------------------------------------------------------------------------
# Face stage


@dataclass
class FaceCorpus:
    """Aligned training material for the face model."""

    crops: np.ndarray  # [N, 3, s, s] clean head crops
    masks: np.ndarray  # [N, 1, s, s] binary head-disc masks
    conds: np.ndarray  # [N, 1, s, s] structure maps in crop coordinates


def build_face_corpus(clips: Sequence[Clip]) -> FaceCorpus:
    crops, masks, conds = [], [], []
    for clip in clips:
        for frame, pose in zip(clip.frames, clip.poses):
            crop, tf = crop_face(frame, pose, clip.identity)
            crops.append(crop)
            masks.append(face_mask(clip.identity, pose, tf))
            conds.append(render_face_condition(pose, clip.identity, tf))
    if not crops:
        raise ValueError("empty face corpus")
    return FaceCorpus(np.stack(crops), np.stack(masks), np.stack(conds))


def _face_batch_loss(model: Sgdm, crops, masks, conds, tvec, eps, drop,
                     sched: NoiseSchedule) -> Tensor:
    order = np.concatenate([np.flatnonzero(~drop), np.flatnonzero(drop)])
    n_keep = int((~drop).sum())
    crops, masks = crops[order], masks[order]
    tvec, eps = tvec[order], eps[order]
    conds = conds[order].copy()
    conds[n_keep:] = 0.0
    masked = crops * (1.0 - masks)
    z = _noise_batch(crops, tvec, eps, sched)
    # Each crop is its own appearance reference, matching the enhancement
    # sampler, which only ever has the crop it is repairing.
    tokens = _mixed_tokens(model, crops[:n_keep], len(order) - n_keep)
    pred = denoise_face(model, Tensor(z), Tensor(masks), Tensor(masked),
                        tvec, tokens, Tensor(conds), TRAIN_W_C)
    return eps_loss(pred, eps)


def train_face(model: Sgdm, corpus: FaceCorpus, cfg: TrainConfig,
               sched: NoiseSchedule):
    """Train the inpainting face model on clean crops.

    Per step the full crop is noised while the mask and the masked clean
    crop ride along as conditioning channels; the model regresses the
    noise. perturb_magnitude does not apply (the corpus is pre-rendered).
    """
    if cfg.stage != "face":
        raise ValueError(f"config is for stage {cfg.stage!r}")
    n = len(corpus.crops)
    if n == 0:
        raise ValueError("empty face corpus")
    model = _clone(model)
    rng = Rng(cfg.seed)
    sid = _STAGE_IDS["face"]
    nb = cfg.batch_size
    curve = []
    for step in range(1, cfg.steps + 1):
        pick = rng.uniform(derive_stream(TRAIN_BATCH, sid, step), 0.0, 1.0,
                           (nb,))
        idx = _pick_indices(pick, n)
        tvec = rng.integers(derive_stream(TRAIN_T, sid, step), 1,
                            sched.T + 1, (nb,))
        eps = rng.normal(derive_stream(TRAIN_NOISE, sid, step),
                         (nb, *corpus.crops.shape[1:]))
        coins = rng.uniform(derive_stream(TRAIN_DROP, sid, step), 0.0, 1.0,
                            (nb,))
        drop = coins < cfg.cond_dropout
        with GradTape() as tape:
            loss = _face_batch_loss(model, corpus.crops[idx],
                                    corpus.masks[idx], corpus.conds[idx],
                                    tvec, eps, drop, sched)
        _sgd_step(tape, loss, model.params, cfg.learning_rate)
        curve.append((step, loss.item()))
    return model, curve


# --------------------------------------------------------------------------
# Dispatch and reporting


def run_stage(clips: Sequence[Clip], model: Sgdm, cfg: TrainConfig,
              sched: NoiseSchedule):
    """Run the stage named by cfg on clip data; face builds its corpus."""
    if cfg.stage == "pretrain":
        return pretrain(clips, model, cfg, sched)
    if cfg.stage == "finetune":
        return finetune(model, clips, cfg, sched)
    return train_face(model, build_face_corpus(clips), cfg, sched)


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows(curve)
