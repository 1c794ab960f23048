"""Face enhancement: crop the head region, regenerate it by inpainting,
paste it back.

Each frame is processed independently: the head box is resampled to the
face resolution, the head disc is masked out, and the face model runs a
full reverse chain on the crop conditioned on a structure map and on
appearance tokens taken from the crop itself. The result is pasted through
the inverse transform with a 2 px linear feather that ramps down to zero at
the mask boundary, so every pixel outside the head disc keeps its input
value bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Sgdm, encode_appearance, denoise_face
from .rng import FACE_INIT, Rng, derive_stream
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, thresholded_eps
from .tensor import Tensor
from .world import (MARKER_RADIUS, STROKE_LEVEL, Identity, Pose, fk,
                    head_box)

FACE_SIZE = 16


@dataclass(frozen=True)
class CropTransform:
    """Body-frame box and its resampling scale into face coordinates."""

    box: tuple          # (cx, cy, side) in body pixels
    out_size: int = FACE_SIZE

    @property
    def scale(self) -> float:
        return self.box[2] / self.out_size

    def to_body(self, fx, fy):
        """Face pixel coordinates -> body pixel coordinates."""
        cx, cy, side = self.box
        return (cx - side / 2.0 + (fx + 0.5) * self.scale - 0.5,
                cy - side / 2.0 + (fy + 0.5) * self.scale - 0.5)

    def to_face(self, bx, by):
        cx, cy, side = self.box
        return ((bx + 0.5 - (cx - side / 2.0)) / self.scale - 0.5,
                (by + 0.5 - (cy - side / 2.0)) / self.scale - 0.5)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at float coordinates with edge clamping."""
    c, h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(img.dtype)
    fy = (ys - y0).astype(img.dtype)
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_box(frame: np.ndarray, box, out_size: int = FACE_SIZE):
    """Bilinear resample of a square box region to the face resolution."""
    if box[2] <= 0:
        raise ValueError("degenerate box")
    tf = CropTransform(box=tuple(float(v) for v in box), out_size=out_size)
    fy, fx = np.mgrid[0:out_size, 0:out_size]
    bx, by = tf.to_body(fx.astype(np.float64), fy.astype(np.float64))
    return bilinear_sample(frame, bx, by), tf


def crop_face(frame: np.ndarray, pose: Pose, identity: Identity):
    """Crop the head box of a frame; returns (crop [3,16,16], transform)."""
    return crop_box(frame, head_box(pose, identity))


def _box_pixels(frame_shape, tf: CropTransform):
    """Pixels whose source coordinate falls inside the crop's sample range.

    Restricting to interpolation (never edge clamping) makes paste after
    crop an exact inverse at identity scale.
    """
    _, h, w = frame_shape
    cx, cy, side = tf.box
    lo = 0.5 * tf.scale - 0.5
    x0 = max(int(np.ceil(cx - side / 2.0 + lo)), 0)
    x1 = min(int(np.floor(cx + side / 2.0 - lo - 1.0)), w - 1)
    y0 = max(int(np.ceil(cy - side / 2.0 + lo)), 0)
    y1 = min(int(np.floor(cy + side / 2.0 - lo - 1.0)), h - 1)
    return slice(y0, y1 + 1), slice(x0, x1 + 1)


def paste_box(frame: np.ndarray, crop: np.ndarray, tf: CropTransform) -> np.ndarray:
    """Hard paste: replace every pixel inside the box from the crop."""
    out = frame.copy()
    ys, xs = _box_pixels(frame.shape, tf)
    by, bx = np.mgrid[ys, xs]
    fx, fy = tf.to_face(bx.astype(np.float64), by.astype(np.float64))
    out[:, ys, xs] = bilinear_sample(crop, fx, fy)
    return out


def face_mask(identity: Identity, pose: Pose, tf: CropTransform) -> np.ndarray:
    """Binary mask [1, 16, 16] of the head disc in crop coordinates."""
    head = fk(pose, identity.torso_length)["head"]
    hx, hy = tf.to_face(head[0], head[1])
    r = identity.head_radius / tf.scale
    fy, fx = np.mgrid[0:tf.out_size, 0:tf.out_size]
    inside = (fx - hx) ** 2 + (fy - hy) ** 2 <= r * r
    return inside.astype(np.float32)[None]


def render_face_condition(pose: Pose, identity: Identity,
                          tf: CropTransform) -> np.ndarray:
    """Structure map for the face model, in crop coordinates [1, 16, 16]:
    a cone marker on the head joint plus a ring on the head disc boundary.
    Geometry only; no appearance enters."""
    j = fk(pose, identity.torso_length)
    hx, hy = tf.to_face(j["head"][0], j["head"][1])
    r = identity.head_radius / tf.scale
    ss = 2
    co = (np.arange(tf.out_size * ss) + 0.5) / ss - 0.5
    px, py = np.meshgrid(co, co)
    d = np.sqrt((px - hx) ** 2 + (py - hy) ** 2)
    sub = np.where(np.abs(d - r) <= 0.75, STROKE_LEVEL, 0.0)
    mr = MARKER_RADIUS / tf.scale * 2.0
    cone = np.where(d <= mr, 1.0 - (1.0 - STROKE_LEVEL) * d / mr, 0.0)
    np.maximum(sub, cone, out=sub)
    s = tf.out_size
    return sub.reshape(s, ss, s, ss).mean(axis=(1, 3)).astype(np.float32)[None]


def _feather_weights(frame_shape, identity: Identity, pose: Pose):
    """Blend weight per body pixel: 1 deep inside the head disc, a 2 px
    linear ramp reaching 0 exactly at the disc boundary, 0 outside."""
    _, h, w = frame_shape
    head = fk(pose, identity.torso_length)["head"]
    y, x = np.mgrid[0:h, 0:w]
    d = np.sqrt((x - head[0]) ** 2 + (y - head[1]) ** 2)
    return np.clip((identity.head_radius - d) / 2.0, 0.0, 1.0).astype(np.float32)


def enhance_frame(frame: np.ndarray, pose: Pose, identity: Identity,
                  face_model: Sgdm, sched: NoiseSchedule, steps: int,
                  rng: Rng, frame_index: int, w_c: float = 2.0) -> np.ndarray:
    crop, tf = crop_face(frame, pose, identity)
    mask = face_mask(identity, pose, tf)
    if mask.sum() == 0:
        return frame.copy()
    masked = (crop * (1.0 - mask)).astype(np.float32)
    cond = render_face_condition(pose, identity, tf)
    tokens = encode_appearance(face_model, Tensor(crop.astype(np.float32)))
    z = rng.normal(derive_stream(FACE_INIT, frame_index, sched.T), crop.shape)
    mask_t = Tensor(mask[None])
    masked_t = Tensor(masked[None])
    cond_t = Tensor(cond[None])
    for t, t_prev in ddim_timesteps(sched.T, steps):
        eps = denoise_face(face_model, Tensor(z[None]), mask_t, masked_t,
                           t, tokens, cond_t, w_c).data[0]
        z = ddim_step(z, thresholded_eps(z, eps, t, sched), t, t_prev, sched)
    gen = np.clip(z, 0.0, 1.0).astype(np.float32)
    new_crop = mask * gen + (1.0 - mask) * crop
    pasted = paste_box(frame, new_crop.astype(np.float32), tf)
    out = frame.copy()
    wgt = _feather_weights(frame.shape, identity, pose)
    touched = wgt > 0
    out[:, touched] = (wgt[touched] * pasted[:, touched]
                       + (1.0 - wgt[touched]) * frame[:, touched])
    return out


def enhance_sequence(frames, poses, identity: Identity, face_model: Sgdm,
                     sched: NoiseSchedule, steps: int = 20,
                     seed: int = 0, w_c: float = 2.0) -> np.ndarray:
    """Enhance every frame independently (no temporal pass)."""
    if len(frames) != len(poses):
        raise ValueError("frames and poses must align")
    rng = Rng(seed)
    out = [enhance_frame(np.asarray(f, dtype=np.float32), p, identity,
                         face_model, sched, steps, rng, i, w_c)
           for i, (f, p) in enumerate(zip(frames, poses))]
    return np.stack(out)
