"""The structure-guided denoiser.

A small two-level U-shaped network over pixel frames with:

- cross-attention from spatial features to appearance tokens at every level,
- a self-attention block at the coarse level that switches, training-free,
  into attention over all frames of a window (video mode),
- a control branch (encoder copy fed by the rendered condition map) whose
  per-level outputs enter the decoder through zero-initialized 1x1
  projections scaled by a coupling weight, and
- a face variant that consumes (noisy crop, mask, masked clean crop)
  concatenated on channels for inpainting.

Parameters live in a flat name -> Tensor dict so persistence and the
optimizer stay trivial. All forward paths are pure functions of
(params, inputs); batching over frames is explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import PARAM_INIT, Rng, derive_stream
from .tensor import (
    Tensor, add, attention, avg_pool2, concat, conv2d, group_norm, linear,
    mul, reshape, scale, silu, split_rows, transpose, upsample_nearest2,
)


@dataclass(frozen=True)
class NetConfig:
    """Architecture sizes. One config for the body model, one for the face."""

    in_ch: int = 3
    out_ch: int = 3
    size: int = 32
    width1: int = 32
    width2: int = 64
    attn_dim: int = 64
    temb_dim: int = 32
    cond_ch: int = 1
    app_grid: int = 4
    groups: int = 4

    @property
    def app_stages(self) -> int:
        stages = 0
        s = self.size
        while s > self.app_grid:
            if s % 2:
                raise ValueError("size must reduce to app_grid by halving")
            s //= 2
            stages += 1
        return stages

    @property
    def token_count(self) -> int:
        return self.app_grid * self.app_grid


BODY = NetConfig()
# Face inpainting input: 3 latent + 1 mask + 3 masked-clean channels.
FACE = NetConfig(in_ch=7, size=16)


@dataclass
class Sgdm:
    cfg: NetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def astype(self, dtype) -> "Sgdm":
        return Sgdm(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})


# --------------------------------------------------------------------------
# Initialization


class _Init:
    def __init__(self, rng: Rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.n = 0
        self.params: dict[str, Tensor] = {}

    def _draw(self, shape) -> np.ndarray:
        out = self.rng.normal(derive_stream(PARAM_INIT, self.n), shape, dtype=self.dtype)
        self.n += 1
        return out

    def conv(self, name: str, cout: int, cin: int, k: int, scale: float = 1.0):
        # math.sqrt, not np.sqrt: a float64 scalar would silently upcast
        # the float32 draw under numpy's promotion rules.
        std = scale * math.sqrt(2.0 / (cin * k * k))
        self.params[name + ".w"] = Tensor(self._draw((cout, cin, k, k)) * std)
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=self.dtype))

    def zero_conv(self, name: str, cout: int, cin: int):
        self.params[name + ".w"] = Tensor(np.zeros((cout, cin, 1, 1), dtype=self.dtype))
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=self.dtype))

    def dense(self, name: str, din: int, dout: int, bias: bool = True,
              scale: float = 1.0):
        std = scale * math.sqrt(1.0 / din)
        self.params[name + ".w"] = Tensor(self._draw((din, dout)) * std)
        if bias:
            self.params[name + ".b"] = Tensor(np.zeros(dout, dtype=self.dtype))

    def norm(self, name: str, ch: int):
        self.params[name + ".g"] = Tensor(np.ones(ch, dtype=self.dtype))
        self.params[name + ".b"] = Tensor(np.zeros(ch, dtype=self.dtype))


def init_params(rng: Rng, cfg: NetConfig = BODY, dtype=np.float32) -> Sgdm:
    """Fresh parameter set: scaled-normal weights, exactly-zero couplings,
    control trunk cloned from the base encoder."""
    ib = _Init(rng, dtype)
    p = ib.params
    d = cfg.attn_dim
    w1, w2 = cfg.width1, cfg.width2
    hidden = d

    def resblock(pre, cin, cout, temb=True):
        ib.norm(pre + ".gn1", cin)
        ib.conv(pre + ".conv1", cout, cin, 3)
        if temb:
            ib.dense(pre + ".temb", hidden, cout)
        ib.norm(pre + ".gn2", cout)
        ib.conv(pre + ".conv2", cout, cout, 3)
        if cin != cout:
            ib.conv(pre + ".skip", cout, cin, 1)

    def attn(pre, ch, kv_dim):
        ib.norm(pre + ".gn", ch)
        ib.dense(pre + ".wq", ch, d, bias=False)
        ib.dense(pre + ".wk", kv_dim, d, bias=False)
        ib.dense(pre + ".wv", kv_dim, d, bias=False)
        ib.dense(pre + ".wo", d, ch, bias=False)

    ib.dense("temb.l1", cfg.temb_dim, hidden)
    ib.dense("temb.l2", hidden, hidden)

    ib.conv("base.stem", w1, cfg.in_ch, 3)
    resblock("base.enc1", w1, w1)
    attn("base.enc1.attn", w1, d)
    ib.conv("base.down", w2, w1, 3)
    resblock("base.enc2", w2, w2)
    attn("base.enc2.self", w2, w2)
    attn("base.enc2.attn", w2, d)
    resblock("base.mid", w2, w2)
    resblock("base.dec2", 2 * w2, w2)
    attn("base.dec2.self", w2, w2)
    attn("base.dec2.attn", w2, d)
    ib.conv("base.up", w1, w2, 3)
    resblock("base.dec1", 2 * w1, w1)
    attn("base.dec1.attn", w1, d)
    ib.norm("base.out.gn", w1)
    # Small (but nonzero) output head: at init the prediction is then
    # dominated by the gated input residual below, and gradients still
    # flow to every upstream parameter from step one.
    ib.conv("base.out", cfg.out_ch, w1, 3, scale=0.05)
    # Residual gate g(t), exactly 1 at init (zero weights).  The optimal
    # eps estimate is (z - sqrt(abar)*x0) / sqrt(1-abar); the 1/sqrt(1-abar)
    # input gain is a per-timestep scalar, and learning it as an explicit
    # scalar head on the time embedding is vastly faster under plain SGD
    # than growing the same gain inside the conv stack.
    ib.dense("base.gate", hidden, 1, scale=0.0)

    # Appearance encoder: reference RGB frame -> token grid, no global pooling.
    chans = [3] + [w1] + [d] * (cfg.app_stages - 1)
    for i in range(cfg.app_stages):
        ib.conv(f"app.conv{i}", chans[i + 1], chans[i], 3)
    p["null_tokens"] = Tensor(
        ib._draw((cfg.token_count, d)) * 0.02
    )

    # Control branch: hint embedding + encoder-trunk clone + zero couplings.
    ib.conv("ctrl.hint", cfg.in_ch, cfg.cond_ch, 3)
    for src, dst in (("base.stem", "ctrl.stem"), ("base.down", "ctrl.down")):
        p[dst + ".w"] = Tensor(p[src + ".w"].data.copy())
        p[dst + ".b"] = Tensor(p[src + ".b"].data.copy())
    for blk in ("enc1", "enc2"):
        for leaf in (".gn1.g", ".gn1.b", ".conv1.w", ".conv1.b",
                     ".gn2.g", ".gn2.b", ".conv2.w", ".conv2.b"):
            p[f"ctrl.{blk}{leaf}"] = Tensor(p[f"base.{blk}{leaf}"].data.copy())
    ib.zero_conv("ctrl.z1", w1, w1)
    ib.zero_conv("ctrl.z2", w2, w2)

    return Sgdm(cfg, p)


# --------------------------------------------------------------------------
# Blocks


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of one or more integer timesteps -> [m, dim]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb.astype(dtype)


def _temb_vector(params: dict, t, dim: int, dtype) -> Tensor:
    base = Tensor(timestep_embedding(t, dim, dtype))
    h = silu(linear(base, params["temb.l1.w"], params["temb.l1.b"]))
    return linear(h, params["temb.l2.w"], params["temb.l2.b"])


def _resblock(p: dict, pre: str, x: Tensor, temb: Tensor | None, groups: int) -> Tensor:
    cout = p[pre + ".conv1.w"].shape[0]
    h = conv2d(silu(group_norm(x, p[pre + ".gn1.g"], p[pre + ".gn1.b"], groups)),
               p[pre + ".conv1.w"], p[pre + ".conv1.b"], 1, 1)
    if temb is not None:
        tp = linear(silu(temb), p[pre + ".temb.w"], p[pre + ".temb.b"])
        h = add(h, reshape(tp, (tp.shape[0], cout, 1, 1)))
    h = conv2d(silu(group_norm(h, p[pre + ".gn2.g"], p[pre + ".gn2.b"], groups)),
               p[pre + ".conv2.w"], p[pre + ".conv2.b"], 1, 1)
    if x.shape[1] != cout:
        x = conv2d(x, p[pre + ".skip.w"], p[pre + ".skip.b"], 1, 0)
    return add(h, x)


def _attn_block(p: dict, pre: str, x: Tensor, kv: Tensor | None,
                all_frame: bool, groups: int) -> Tensor:
    """Residual attention block.

    kv = None: self-attention over each frame's own tokens, or over the
    concatenated tokens of all frames when all_frame is set (video mode).
    kv given: cross-attention to appearance tokens; [L, d] means one token
    set shared by every frame, [n, L, d] means per-frame token sets.
    """
    n, C, H, W = x.shape
    L = H * W
    xn = group_norm(x, p[pre + ".gn.g"], p[pre + ".gn.b"], groups)
    tok = reshape(transpose(xn, (0, 2, 3, 1)), (n * L, C))
    q = linear(tok, p[pre + ".wq.w"])

    if kv is None:
        k = linear(tok, p[pre + ".wk.w"])
        v = linear(tok, p[pre + ".wv.w"])
        if all_frame:
            att = attention(q, k, v)
        else:
            outs = [attention(qi, ki, vi) for qi, ki, vi in
                    zip(split_rows(q, n), split_rows(k, n), split_rows(v, n))]
            att = concat(outs, axis=0) if n > 1 else outs[0]
    elif len(kv.shape) == 2:
        k = linear(kv, p[pre + ".wk.w"])
        v = linear(kv, p[pre + ".wv.w"])
        att = attention(q, k, v)
    else:
        nt, Lt, dt = kv.shape
        if nt != n:
            raise ValueError("per-frame token count mismatch")
        kv2 = reshape(kv, (n * Lt, dt))
        k = linear(kv2, p[pre + ".wk.w"])
        v = linear(kv2, p[pre + ".wv.w"])
        outs = [attention(qi, ki, vi) for qi, ki, vi in
                zip(split_rows(q, n), split_rows(k, n), split_rows(v, n))]
        att = concat(outs, axis=0) if n > 1 else outs[0]

    o = linear(att, p[pre + ".wo.w"])
    res = transpose(reshape(o, (n, H, W, C)), (0, 3, 1, 2))
    return add(x, res)


# --------------------------------------------------------------------------
# Public forward paths


def encode_appearance(model: Sgdm, ref: Tensor) -> Tensor:
    """Reference frame(s) -> appearance token grid, flattened to [L, d].

    Accepts [3, H, W] (returns [L, d]) or [n, 3, H, W] (returns [n, L, d]).
    The grid is the final feature map; nothing is pooled away.
    """
    single = len(ref.shape) == 3
    x = reshape(ref, (1, *ref.shape)) if single else ref
    if x.shape[2] != model.cfg.size or x.shape[3] != model.cfg.size:
        raise ValueError(f"reference resolution must be {model.cfg.size}")
    for i in range(model.cfg.app_stages):
        x = avg_pool2(silu(conv2d(
            x, model.params[f"app.conv{i}.w"], model.params[f"app.conv{i}.b"], 1, 1)))
    n, d, gh, gw = x.shape
    tokens = reshape(transpose(x, (0, 2, 3, 1)), (n, gh * gw, d))
    return reshape(tokens, (gh * gw, d)) if single else tokens


def control_features(model: Sgdm, cond: Tensor) -> tuple[Tensor, Tensor]:
    """Condition map(s) -> per-decoder-level features through zero couplings.

    cond: [n, cond_ch, H, W] or a single map [cond_ch, H, W]. Returns
    (level-1 at full res, level-2 at half res). The trunk mirrors the base
    encoder's conv stack and sees only the condition map (no latent, no
    timestep).
    """
    if len(cond.shape) == 3:
        f1, f2 = control_features(model, reshape(cond, (1, *cond.shape)))
        return reshape(f1, f1.shape[1:]), reshape(f2, f2.shape[1:])
    p = model.params
    g = model.cfg.groups
    if cond.shape[2] != model.cfg.size or cond.shape[3] != model.cfg.size:
        raise ValueError("condition resolution mismatch")
    h = conv2d(cond, p["ctrl.hint.w"], p["ctrl.hint.b"], 1, 1)
    h = conv2d(h, p["ctrl.stem.w"], p["ctrl.stem.b"], 1, 1)
    f1 = _resblock(p, "ctrl.enc1", h, None, g)
    dn = conv2d(avg_pool2(f1), p["ctrl.down.w"], p["ctrl.down.b"], 1, 1)
    f2 = _resblock(p, "ctrl.enc2", dn, None, g)
    c1 = conv2d(f1, p["ctrl.z1.w"], p["ctrl.z1.b"], 1, 0)
    c2 = conv2d(f2, p["ctrl.z2.w"], p["ctrl.z2.b"], 1, 0)
    return c1, c2


def sgdm_forward(model: Sgdm, z: Tensor, t, tokens: Tensor,
                 cond: Tensor | None, w_c: float, all_frame: bool) -> Tensor:
    """Noise prediction for a batch of frames [n, in_ch, H, W].

    all_frame=True treats the batch as one video window: the self-attention
    blocks attend over the concatenation of all frames' spatial tokens and t
    must be a single timestep. all_frame=False treats rows independently
    (training batches): t may be per-row and tokens may be per-row.
    Decoder features pick up w_c * control output per level when a condition
    map is supplied.
    """
    p = model.params
    cfg = model.cfg
    g = cfg.groups
    n = z.shape[0]
    if z.shape[1] != cfg.in_ch or z.shape[2] != cfg.size or z.shape[3] != cfg.size:
        raise ValueError(f"latent shape {z.shape} does not match config")
    if all_frame and np.ndim(t) != 0:
        raise ValueError("video mode uses one shared timestep")

    temb = _temb_vector(p, t, cfg.temb_dim, z.dtype)
    ctrl = control_features(model, cond) if cond is not None else None

    s = conv2d(z, p["base.stem.w"], p["base.stem.b"], 1, 1)
    e1 = _resblock(p, "base.enc1", s, temb, g)
    e1 = _attn_block(p, "base.enc1.attn", e1, tokens, all_frame, g)
    dn = conv2d(avg_pool2(e1), p["base.down.w"], p["base.down.b"], 1, 1)
    e2 = _resblock(p, "base.enc2", dn, temb, g)
    e2 = _attn_block(p, "base.enc2.self", e2, None, all_frame, g)
    e2 = _attn_block(p, "base.enc2.attn", e2, tokens, all_frame, g)
    m = _resblock(p, "base.mid", e2, temb, g)
    if ctrl is not None and w_c != 0.0:
        m = add(m, scale(ctrl[1], w_c))
    h2 = _resblock(p, "base.dec2", concat([m, e2], 1), temb, g)
    h2 = _attn_block(p, "base.dec2.self", h2, None, all_frame, g)
    h2 = _attn_block(p, "base.dec2.attn", h2, tokens, all_frame, g)
    u = conv2d(upsample_nearest2(h2), p["base.up.w"], p["base.up.b"], 1, 1)
    if ctrl is not None and w_c != 0.0:
        u = add(u, scale(ctrl[0], w_c))
    h1 = _resblock(p, "base.dec1", concat([u, e1], 1), temb, g)
    h1 = _attn_block(p, "base.dec1.attn", h1, tokens, all_frame, g)
    out = conv2d(silu(group_norm(h1, p["base.out.gn.g"], p["base.out.gn.b"], g)),
                 p["base.out.w"], p["base.out.b"], 1, 1)
    # Gated input residual: eps is predicted as g(t)*z + correction, g(0)=1.
    # At large t the true eps is nearly the input itself, so the exact
    # solution is built in from step one; at small t the optimal input gain
    # grows like 1/sqrt(1-abar), which the scalar gate can track.  SGD then
    # only has to learn the signal term, which the conditioning supplies.
    # For the inpainting variant the first out_ch channels are the latent.
    lift = linear(temb, p["base.gate.w"], p["base.gate.b"])
    gate = add(Tensor(np.ones((1, 1), dtype=lift.data.dtype)), lift)
    gate = reshape(gate, (gate.shape[0], 1, 1, 1))
    return add(out, mul(gate, Tensor(z.data[:, :cfg.out_ch])))


def denoise_frame(model: Sgdm, z_t: Tensor, t: int, tokens: Tensor,
                  cond: Tensor | None, w_c: float) -> Tensor:
    """Single-frame noise prediction; [C, H, W] in and out."""
    z = reshape(z_t, (1, *z_t.shape))
    c = reshape(cond, (1, *cond.shape)) if cond is not None else None
    out = sgdm_forward(model, z, t, tokens, c, w_c, all_frame=True)
    return reshape(out, z_t.shape)


def denoise_face(model: Sgdm, latent: Tensor, mask: Tensor, masked_latent: Tensor,
                 t, tokens: Tensor, cond: Tensor | None, w_c: float,
                 all_frame: bool = False) -> Tensor:
    """Face inpainting prediction from (noisy crop, mask, masked clean crop).

    Inputs are [n, 3, s, s], [n, 1, s, s], [n, 3, s, s], or all rank-3 for a
    single crop; channel order is pinned: latent, mask, masked latent.
    Output predicts noise on the crop.
    """
    if len(latent.shape) == 3:
        out = denoise_face(
            model, reshape(latent, (1, *latent.shape)),
            reshape(mask, (1, *mask.shape)),
            reshape(masked_latent, (1, *masked_latent.shape)),
            t, tokens,
            None if cond is None else reshape(cond, (1, *cond.shape)),
            w_c, all_frame=all_frame)
        return reshape(out, out.shape[1:])
    if mask.shape[1] != 1:
        raise ValueError("mask must have one channel")
    if not np.isin(mask.data, (0.0, 1.0)).all():
        raise ValueError("mask entries must be 0 or 1")
    if np.any(np.abs(masked_latent.data * mask.data) > 0):
        raise ValueError("masked latent must vanish inside the mask")
    z = concat([latent, mask, masked_latent], 1)
    return sgdm_forward(model, z, t, tokens, cond, w_c, all_frame=all_frame)
