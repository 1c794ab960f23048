"""Video-level inference: sliding-window planning and overlapped denoising.

Per timestep, every window in the plan is denoised as one all-frame
attention batch (two passes when guidance is on), the per-frame noise
predictions are averaged over the windows that visit each frame, and then
the whole sequence takes one scheduler step with (frame, t)-keyed draws.
Because the noise fusion is an arithmetic mean and every random draw is
keyed by structure rather than call order, window processing order cannot
change the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Sgdm, encode_appearance, sgdm_forward
from .rng import INIT_LATENT, STEP_NOISE, Rng, derive_stream
from .schedule import (GuidanceConfig, NoiseSchedule, cfg_combine, ddim_step,
                       ddim_timesteps, ddpm_step, thresholded_eps)
from .tensor import Tensor
from .world import render_condition


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple      # ((wb, we), ...), end-exclusive, sorted by start
    counts: np.ndarray  # int64 [N], visits per frame
    ws: int
    os: int


def plan_windows(n: int, ws: int, os: int) -> WindowPlan:
    """Sliding starts at i*(ws-os); a window that would overrun the end is
    clamped to (n-ws, n); duplicate starts are emitted once."""
    if not (0 <= os < ws <= n):
        raise ValueError(f"need 0 <= os < ws <= n, got ws={ws} os={os} n={n}")
    step = ws - os
    windows = []
    seen = set()
    i = 0
    while True:
        wb = i * step
        we = wb + ws
        if we > n:
            wb, we = n - ws, n
        if wb not in seen:
            seen.add(wb)
            windows.append((wb, we))
        if we >= n:
            break
        i += 1
    counts = np.zeros(n, dtype=np.int64)
    for wb, we in windows:
        counts[wb:we] += 1
    return WindowPlan(windows=tuple(windows), counts=counts, ws=ws, os=os)


def batched_denoise(model: Sgdm, z: np.ndarray, t, tokens, conds,
                    w_c: float = 2.0) -> np.ndarray:
    """Noise prediction for one window with all-frame cross-attention.

    z: [n, C, H, W]; conds: [n, 1, H, W] or None. A window of length one is
    exactly the frame model.
    """
    if conds is not None and len(conds) != len(z):
        raise ValueError("one condition map per frame required")
    cond_t = None if conds is None else Tensor(np.asarray(conds, dtype=z.dtype))
    out = sgdm_forward(model, Tensor(z), t, tokens, cond_t, w_c, all_frame=True)
    return out.data


def guided_window_eps(model: Sgdm, z: np.ndarray, t, tokens, conds,
                      w_c: float, guidance: GuidanceConfig | None) -> np.ndarray:
    """CFG inside the window: conditional pass plus null pass, combined."""
    eps_c = batched_denoise(model, z, t, tokens, conds, w_c)
    if guidance is None:
        return eps_c
    null_tokens = model.params["null_tokens"]
    blank = None if conds is None else np.zeros_like(conds)
    eps_u = batched_denoise(model, z, t, null_tokens, blank, w_c)
    return cfg_combine(eps_u, eps_c, guidance.scale)


def step_frames(z: np.ndarray, eps_bar: np.ndarray, t: int,
                sched: NoiseSchedule, rng: Rng | None,
                t_prev: int | None = None) -> np.ndarray:
    """Advance every frame by one scheduler step.

    The noise estimate is first re-derived from a clamped x0 prediction
    (static thresholding). Pixels live in [0, 1]; without the clamp an
    imperfect estimate at large t is divided by a tiny sqrt(abar) and the
    chain saturates into binary noise before the model can correct it.

    Ancestral mode (t_prev None) draws each frame's noise from its own
    (frame, t) stream so the result does not depend on how frames were
    grouped into windows. The spaced deterministic step needs no draws.
    """
    eps_bar = thresholded_eps(z, eps_bar, t, sched)
    if t_prev is not None:
        return ddim_step(z, eps_bar, t, t_prev, sched)
    out = np.empty_like(z)
    for i in range(len(z)):
        out[i] = ddpm_step(z[i], eps_bar[i], t, sched, rng,
                           derive_stream(STEP_NOISE, i, t))
    return out


def overlapped_denoise_step(model: Sgdm, z: np.ndarray, t: int,
                            plan: WindowPlan, conds, tokens,
                            guidance: GuidanceConfig | None,
                            sched: NoiseSchedule, rng: Rng | None,
                            w_c: float = 2.0,
                            t_prev: int | None = None) -> np.ndarray:
    """One timestep of batch-overlapped denoising over the whole sequence.

    Frames visited once keep their window's prediction bit-exactly (written
    by assignment, divided by 1.0); shared frames get the mean. Windows are
    accumulated in sorted order regardless of plan ordering, which makes the
    result independent of window processing order.
    """
    n = len(z)
    if len(plan.counts) != n:
        raise ValueError("plan was built for a different sequence length")
    if conds is not None and len(conds) != n:
        raise ValueError("one condition map per frame required")
    noise = np.zeros_like(z)
    visited = np.zeros(n, dtype=bool)
    for wb, we in sorted(plan.windows):
        cw = None if conds is None else conds[wb:we]
        eps_w = guided_window_eps(model, z[wb:we], t, tokens, cw, w_c, guidance)
        for i in range(wb, we):
            if visited[i]:
                noise[i] += eps_w[i - wb]
            else:
                noise[i] = eps_w[i - wb]
                visited[i] = True
    noise /= plan.counts.astype(z.dtype)[:, None, None, None]
    return step_frames(z, noise, t, sched, rng, t_prev)


def init_latents(rng: Rng, n: int, frame_shape, T: int,
                 dtype=np.float32) -> np.ndarray:
    """Chain-start latents, one keyed draw per frame."""
    return np.stack([
        rng.normal(derive_stream(INIT_LATENT, i, T), frame_shape, dtype=dtype)
        for i in range(n)
    ])


def generate_sequence(poses, ref_frame: np.ndarray, model: Sgdm,
                      sched: NoiseSchedule, steps: int = 20,
                      cfg_scale: float = 7.5, ws: int = 16, os: int = 4,
                      seed: int = 0, w_c: float = 2.0,
                      sampler: str = "ddim") -> np.ndarray:
    """Full sequence synthesis; returns [N, 3, H, W] float32 in [0, 1].

    Sequences shorter than ws fall back to a single window of length N.
    The decoder is the identity, so the final latents are simply clamped.
    """
    n = len(poses)
    if n < 1:
        raise ValueError("need at least one pose")
    ws_eff = min(ws, n)
    os_eff = min(os, ws_eff - 1)
    plan = plan_windows(n, ws_eff, os_eff)
    conds = np.stack([render_condition(p) for p in poses])
    tokens = encode_appearance(model, Tensor(np.asarray(ref_frame, dtype=np.float32)))
    guidance = GuidanceConfig(scale=cfg_scale)
    rng = Rng(seed)
    z = init_latents(rng, n, ref_frame.shape, sched.T)
    if sampler == "ddim":
        pairs = ddim_timesteps(sched.T, steps)
    elif sampler == "ddpm":
        pairs = [(t, None) for t in range(sched.T, 0, -1)]
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    for t, t_prev in pairs:
        z = overlapped_denoise_step(model, z, t, plan, conds, tokens,
                                    guidance, sched, rng, w_c, t_prev)
    return np.clip(z, 0.0, 1.0)
