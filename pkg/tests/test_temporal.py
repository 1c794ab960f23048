"""Sliding-window planning and batch-overlapped temporal denoising."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posevid.model import BODY, NetConfig, denoise_frame, encode_appearance, init_params
from posevid.rng import Rng
from posevid.schedule import GuidanceConfig, build_schedule, cfg_combine, ddim_timesteps
from posevid.temporal import (WindowPlan, batched_denoise, generate_sequence,
                              guided_window_eps, init_latents,
                              overlapped_denoise_step, plan_windows, step_frames)
from posevid.tensor import Tensor, flop_scope
from posevid.world import sample_identity, sample_pose_sequence, build_clip

# Thin full-resolution config: real 32x32 frames (the condition renderer is
# fixed at world size) but narrow channels so chains stay cheap.
THIN = NetConfig(width1=4, width2=8, attn_dim=8, temb_dim=8, groups=2)

SCHED = build_schedule(50, 0.005, 0.05)


@pytest.fixture(scope="module")
def thin_model():
    return init_params(Rng(3), THIN)


@pytest.fixture(scope="module")
def world_clip():
    rng = Rng(9)
    ident = sample_identity(rng, key=0)
    poses = sample_pose_sequence(rng, 8, key=5)
    return build_clip(ident, poses), poses


# --------------------------------------------------------------------------
# plan_windows


def test_plan_long_sequence_counts():
    plan = plan_windows(300, 16, 4)
    assert len(plan.windows) == 25
    assert int(plan.counts.sum()) == 400


def test_plan_single_window():
    plan = plan_windows(16, 16, 4)
    assert plan.windows == ((0, 16),)
    assert np.all(plan.counts == 1)


def test_plan_clamped_tail():
    plan = plan_windows(20, 16, 4)
    assert plan.windows == ((0, 16), (4, 20))
    counts = np.asarray(plan.counts)
    assert np.all(counts[0:4] == 1)
    assert np.all(counts[4:16] == 2)
    assert np.all(counts[16:20] == 1)
    assert int(counts.sum()) == 32


@pytest.mark.parametrize("n,ws,os", [(10, 0, 0), (10, 4, 4), (10, 4, -1), (10, 11, 0)])
def test_plan_rejects_bad_sizes(n, ws, os):
    with pytest.raises(ValueError):
        plan_windows(n, ws, os)


@given(
    n=st.integers(min_value=1, max_value=200),
    ws=st.integers(min_value=1, max_value=200),
    os_frac=st.floats(min_value=0.0, max_value=0.99),
)
@settings(max_examples=200, deadline=None)
def test_plan_invariants(n, ws, os_frac):
    ws = min(ws, n)
    os = int(os_frac * ws)
    plan = plan_windows(n, ws, os)
    counts = np.asarray(plan.counts)
    # coverage: every frame visited at least once
    assert np.all(counts >= 1)
    # bookkeeping: total window-frames equals the count total
    assert sum(we - wb for wb, we in plan.windows) == int(counts.sum())
    # every window has the planned size and stays in range
    for wb, we in plan.windows:
        assert we - wb == ws
        assert 0 <= wb and we <= n
    # unclamped windows sit exactly on the stride grid
    step = ws - os
    for i, (wb, we) in enumerate(plan.windows[:-1]):
        assert wb == i * step


def test_plan_consecutive_overlap_is_os():
    plan = plan_windows(100, 10, 3)
    for (ab, ae), (bb, be) in zip(plan.windows, plan.windows[1:-1]):
        assert ae - bb == 3


# --------------------------------------------------------------------------
# batched_denoise


def test_window_of_one_is_the_frame_model(thin_model, world_clip):
    clip, _ = world_clip
    z = Rng(4).normal(0, (1, 3, 32, 32))
    tokens = encode_appearance(thin_model, Tensor(clip.frames[0]))
    conds = clip.conds[:1]
    got = batched_denoise(thin_model, z, 7, tokens, conds, w_c=2.0)
    want = denoise_frame(thin_model, Tensor(z[0]), 7, tokens,
                         Tensor(conds[0]), 2.0)
    assert np.array_equal(got[0], want.data)


def test_identical_frames_get_identical_noise(thin_model, world_clip):
    clip, _ = world_clip
    frame = Rng(5).normal(1, (3, 32, 32))
    z = np.stack([frame, frame])
    conds = np.stack([clip.conds[0], clip.conds[0]])
    tokens = encode_appearance(thin_model, Tensor(clip.frames[0]))
    out = batched_denoise(thin_model, z, 3, tokens, conds, w_c=2.0)
    assert np.array_equal(out[0], out[1])


def test_condition_count_mismatch_rejected(thin_model, world_clip):
    clip, _ = world_clip
    z = Rng(6).normal(0, (3, 3, 32, 32))
    tokens = encode_appearance(thin_model, Tensor(clip.frames[0]))
    with pytest.raises(ValueError):
        batched_denoise(thin_model, z, 3, tokens, clip.conds[:2], w_c=2.0)


def test_attention_cost_quadratic_in_window_length(thin_model, world_clip):
    clip, _ = world_clip
    tokens = encode_appearance(thin_model, Tensor(clip.frames[0]))
    costs = {}
    for ws in (1, 2, 4):
        z = Rng(7).normal(ws, (ws, 3, 32, 32))
        conds = np.broadcast_to(clip.conds[0], (ws, *clip.conds[0].shape)).copy()
        with flop_scope() as fs:
            batched_denoise(thin_model, z, 3, tokens, conds, w_c=2.0)
        costs[ws] = fs.counts["attention"]
    # all-frame attention token count doubles with ws, so cost quadruples
    assert costs[2] / costs[1] == pytest.approx(4.0, rel=0.35)
    assert costs[4] / costs[2] == pytest.approx(4.0, rel=0.35)


# --------------------------------------------------------------------------
# overlapped_denoise_step


def _tokens_and_conds(model, clip, n):
    tokens = encode_appearance(model, Tensor(clip.frames[0]))
    return tokens, clip.conds[:n]


def test_single_window_plan_equals_direct_batch(thin_model, world_clip):
    clip, _ = world_clip
    n = 5
    tokens, conds = _tokens_and_conds(thin_model, clip, n)
    z = Rng(8).normal(0, (n, 3, 32, 32))
    plan = plan_windows(n, n, 0)
    got = overlapped_denoise_step(thin_model, z, 9, plan, conds, tokens,
                                  None, SCHED, None, 2.0, t_prev=4)
    eps = batched_denoise(thin_model, z, 9, tokens, conds, 2.0)
    want = step_frames(z, eps, 9, SCHED, None, t_prev=4)
    assert np.array_equal(got, want)


def test_constant_stub_survives_normalization(thin_model, world_clip, monkeypatch):
    clip, _ = world_clip
    n = 8
    tokens, conds = _tokens_and_conds(thin_model, clip, n)
    const = np.full((3, 32, 32), 0.25, dtype=np.float32)

    def stub(model, z, t, tokens, conds, w_c=2.0):
        return np.broadcast_to(const, z.shape).copy()

    monkeypatch.setattr("posevid.temporal.batched_denoise", stub)
    z = Rng(10).normal(0, (n, 3, 32, 32))
    plan = plan_windows(n, 4, 2)
    got = overlapped_denoise_step(thin_model, z, 9, plan, conds, tokens,
                                  None, SCHED, None, 2.0, t_prev=4)
    eps = np.broadcast_to(const, z.shape).astype(np.float32)
    want = step_frames(z, eps.copy(), 9, SCHED, None, t_prev=4)
    assert np.array_equal(got, want)


def test_disjoint_windows_equal_independent_denoising(thin_model, world_clip):
    clip, _ = world_clip
    n = 8
    ws = 4
    tokens, conds = _tokens_and_conds(thin_model, clip, n)
    z = Rng(11).normal(0, (n, 3, 32, 32))
    plan = plan_windows(n, ws, 0)
    assert np.all(np.asarray(plan.counts) == 1)
    got = overlapped_denoise_step(thin_model, z, 9, plan, conds, tokens,
                                  None, SCHED, None, 2.0, t_prev=4)
    eps = np.empty_like(z)
    for wb, we in plan.windows:
        eps[wb:we] = batched_denoise(thin_model, z[wb:we], 9, tokens,
                                     conds[wb:we], 2.0)
    want = step_frames(z, eps, 9, SCHED, None, t_prev=4)
    assert np.array_equal(got, want)


def test_window_order_independence(thin_model, world_clip):
    clip, _ = world_clip
    n = 8
    tokens, conds = _tokens_and_conds(thin_model, clip, n)
    z = Rng(12).normal(0, (n, 3, 32, 32))
    plan = plan_windows(n, 4, 2)
    shuffled = WindowPlan(windows=tuple(reversed(plan.windows)),
                          counts=plan.counts, ws=plan.ws, os=plan.os)
    a = overlapped_denoise_step(thin_model, z, 9, plan, conds, tokens,
                                None, SCHED, None, 2.0, t_prev=4)
    b = overlapped_denoise_step(thin_model, z, 9, shuffled, conds, tokens,
                                None, SCHED, None, 2.0, t_prev=4)
    assert np.array_equal(a, b)


def test_normalized_noise_is_window_mean(thin_model, world_clip, monkeypatch):
    clip, _ = world_clip
    n = 6
    tokens, conds = _tokens_and_conds(thin_model, clip, n)
    calls = []

    def stub(model, z, t, tokens, conds, w_c=2.0):
        out = np.full(z.shape, float(len(calls) + 1), dtype=np.float32)
        calls.append((len(z), out[0, 0, 0, 0]))
        return out

    monkeypatch.setattr("posevid.temporal.batched_denoise", stub)
    z = np.zeros((n, 3, 32, 32), dtype=np.float32)
    plan = plan_windows(n, 4, 2)  # windows (0,4),(2,6): frames 2,3 shared
    got = overlapped_denoise_step(thin_model, z, 9, plan, conds, tokens,
                                  None, SCHED, None, 2.0, t_prev=4)
    mean = np.zeros_like(z)
    mean[0:2] = 1.0
    mean[2:4] = 1.5
    mean[4:6] = 2.0
    want = step_frames(z, mean, 9, SCHED, None, t_prev=4)
    assert np.allclose(got, want, atol=1e-6)


def test_plan_length_mismatch_rejected(thin_model, world_clip):
    clip, _ = world_clip
    tokens, conds = _tokens_and_conds(thin_model, clip, 6)
    z = Rng(13).normal(0, (6, 3, 32, 32))
    with pytest.raises(ValueError):
        overlapped_denoise_step(thin_model, z, 9, plan_windows(8, 4, 0),
                                conds, tokens, None, SCHED, None, 2.0, t_prev=4)


# --------------------------------------------------------------------------
# generate_sequence


def test_short_sequence_equals_direct_batched_chain(thin_model, world_clip):
    clip, poses = world_clip
    n = 5
    ref = clip.frames[0]
    got = generate_sequence(poses[:n], ref, thin_model, SCHED, steps=5,
                            cfg_scale=3.0, ws=16, os=4, seed=21)

    from posevid.world import render_condition
    conds = np.stack([render_condition(p) for p in poses[:n]])
    tokens = encode_appearance(thin_model, Tensor(np.asarray(ref, dtype=np.float32)))
    rng = Rng(21)
    z = init_latents(rng, n, ref.shape, SCHED.T)
    guidance = GuidanceConfig(scale=3.0)
    for t, t_prev in ddim_timesteps(SCHED.T, 5):
        eps = guided_window_eps(thin_model, z, t, tokens, conds, 2.0, guidance)
        z = step_frames(z, eps, t, SCHED, rng, t_prev)
    want = np.clip(z, 0.0, 1.0)
    assert np.array_equal(got, want)


def test_single_frame_sequence_is_frame_generation(thin_model, world_clip):
    clip, poses = world_clip
    ref = clip.frames[0]
    got = generate_sequence(poses[:1], ref, thin_model, SCHED, steps=4,
                            cfg_scale=2.0, ws=16, os=4, seed=33)
    assert got.shape == (1, 3, 32, 32)

    from posevid.world import render_condition
    cond = render_condition(poses[0])
    tokens = encode_appearance(thin_model, Tensor(np.asarray(ref, dtype=np.float32)))
    null_tokens = thin_model.params["null_tokens"]
    z = init_latents(Rng(33), 1, ref.shape, SCHED.T)
    for t, t_prev in ddim_timesteps(SCHED.T, 4):
        e_c = denoise_frame(thin_model, Tensor(z[0]), t, tokens, Tensor(cond), 2.0)
        e_u = denoise_frame(thin_model, Tensor(z[0]), t, null_tokens,
                            Tensor(np.zeros_like(cond)), 2.0)
        eps = cfg_combine(e_u.data, e_c.data, 2.0)[None]
        z = step_frames(z, eps, t, SCHED, None, t_prev)
    want = np.clip(z, 0.0, 1.0)
    assert np.array_equal(got, want)


def test_generate_sequence_rejects_empty(thin_model, world_clip):
    clip, _ = world_clip
    with pytest.raises(ValueError):
        generate_sequence([], clip.frames[0], thin_model, SCHED)


def test_generate_sequence_rejects_unknown_sampler(thin_model, world_clip):
    clip, poses = world_clip
    with pytest.raises(ValueError):
        generate_sequence(poses[:2], clip.frames[0], thin_model, SCHED,
                          sampler="euler")


def test_generate_sequence_deterministic(thin_model, world_clip):
    clip, poses = world_clip
    a = generate_sequence(poses[:3], clip.frames[0], thin_model, SCHED,
                          steps=3, ws=8, os=2, seed=5)
    b = generate_sequence(poses[:3], clip.frames[0], thin_model, SCHED,
                          steps=3, ws=8, os=2, seed=5)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
