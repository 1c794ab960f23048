"""Procedural anchor world: identities, poses, and deterministic rendering.

A figure is a stick body (torso plus two two-segment arms) with a head disc
and small hand discs drawn in the head color, standing in front of a flat
background. Rendering is a pure function of (Identity, Pose) with 2x
supersampling, so edges stay stable enough for the color-peak joint oracle
in metrics.

Condition maps are rendered from the pose alone on a fixed canonical
skeleton: they carry structure, never appearance. Generated frames follow
the identity's own geometry, so a constant per-identity offset between
condition strokes and body pixels is part of what the model learns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng, TRAIN_PERTURB, WORLD_IDENTITY, WORLD_POSE, derive_stream

SIZE = 32
MARGIN = 2.0
K_ANGLES = 6

# Canonical skeleton used for condition maps (identity-independent).
CANON_TORSO = 9.0
UPPER_FRAC = 0.55
FORE_FRAC = 0.45
HEAD_OFF_FRAC = 0.42
ARM_SPREAD = 0.5  # rest-pose outward tilt of the arms, radians

HAND_RADIUS = 1.5
STROKE_HALF = 0.5    # condition stroke half-width, px
MARKER_RADIUS = 1.2  # condition joint marker radius, px
STROKE_LEVEL = 0.6   # markers are 1.0 so local argmax lands on joints

# Per-angle bounds: [shoulder_l, elbow_l, shoulder_r, elbow_r, head_tilt,
# torso_lean]. Chosen with the sampling ranges below so forward kinematics
# can never leave the 2 px frame margin; see pose_in_bounds.
ANGLE_BOUNDS = np.array(
    [[-0.8, 0.8], [-1.2, 1.2], [-0.8, 0.8], [-1.2, 1.2],
     [-0.3, 0.3], [-0.25, 0.25]]
)
MAX_POSE_STEP = 0.15

JOINT_NAMES = ("root", "neck", "head", "elbow_l", "hand_l", "elbow_r", "hand_r")
LANDMARK_NAMES = ("head", "hand_l", "hand_r")


@dataclass(frozen=True)
class Identity:
    """Appearance and geometry of one figure; colors are RGB in [0,1]."""

    body_color: tuple
    head_color: tuple
    background_color: tuple
    limb_width: float
    head_radius: float
    torso_length: float


@dataclass(frozen=True)
class Pose:
    root: tuple            # (x, y) in pixels, y grows downward
    joint_angles: np.ndarray  # [K_ANGLES] radians; treated as read-only


def _dir_down(phi):
    return np.array([np.sin(phi), np.cos(phi)])


def _dir_up(phi):
    return np.array([np.sin(phi), -np.cos(phi)])


def fk(pose: Pose, torso_length: float = CANON_TORSO) -> dict:
    """Forward kinematics to named joint positions (x, y) in pixels."""
    a = np.asarray(pose.joint_angles, dtype=np.float64)
    root = np.asarray(pose.root, dtype=np.float64)
    lean = a[5]
    neck = root + torso_length * _dir_up(lean)
    head = neck + HEAD_OFF_FRAC * torso_length * _dir_up(lean + a[4])
    upper = UPPER_FRAC * torso_length
    fore = FORE_FRAC * torso_length
    phi_l = lean - ARM_SPREAD - a[0]
    elbow_l = neck + upper * _dir_down(phi_l)
    hand_l = elbow_l + fore * _dir_down(phi_l - a[1])
    phi_r = lean + ARM_SPREAD + a[2]
    elbow_r = neck + upper * _dir_down(phi_r)
    hand_r = elbow_r + fore * _dir_down(phi_r + a[3])
    return {
        "root": root, "neck": neck, "head": head,
        "elbow_l": elbow_l, "hand_l": hand_l,
        "elbow_r": elbow_r, "hand_r": hand_r,
    }


def landmarks(pose: Pose, torso_length: float = CANON_TORSO) -> np.ndarray:
    """Detectable landmark positions [3, 2]: head, left hand, right hand."""
    j = fk(pose, torso_length)
    return np.stack([j[n] for n in LANDMARK_NAMES])


def pose_in_bounds(pose: Pose, torso_length: float = CANON_TORSO) -> bool:
    pts = np.stack(list(fk(pose, torso_length).values()))
    return bool(
        (pts >= MARGIN).all() and (pts <= SIZE - 1 - MARGIN).all()
    )


def valid_pose(root, joint_angles) -> Pose:
    angles = np.clip(
        np.asarray(joint_angles, dtype=np.float64),
        ANGLE_BOUNDS[:, 0], ANGLE_BOUNDS[:, 1],
    )
    return Pose(root=(float(root[0]), float(root[1])), joint_angles=angles)


# --------------------------------------------------------------------------
# Sampling


def _color_sep(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _color_dist(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def sample_identity(rng: Rng, key: int = 0) -> Identity:
    """Draw an identity with detectability-preserving color margins.

    Body and background separate by ≥ 0.25 in some channel (the invariant
    needs 0.2). The head/hand skin color additionally keeps a Euclidean
    distance ≥ 0.6 from both, so no body or background pixel can answer the
    skin-similarity filter that grounds landmark recovery.
    """
    g = rng._gen(derive_stream(WORLD_IDENTITY, key))
    bg = g.uniform(0.0, 1.0, 3)
    body = g.uniform(0.0, 1.0, 3)
    while _color_sep(body, bg) < 0.25:
        body = g.uniform(0.0, 1.0, 3)
    head = g.uniform(0.0, 1.0, 3)
    while _color_dist(head, bg) < 0.6 or _color_dist(head, body) < 0.6:
        head = g.uniform(0.0, 1.0, 3)
    return Identity(
        body_color=tuple(float(c) for c in body),
        head_color=tuple(float(c) for c in head),
        background_color=tuple(float(c) for c in bg),
        limb_width=float(g.uniform(1.8, 2.6)),
        head_radius=float(g.uniform(2.8, 4.0)),
        torso_length=float(g.uniform(8.0, 9.5)),
    )


def sample_pose_sequence(rng: Rng, n: int, key: int = 0) -> list:
    """Bounded smooth random walk in angle space; the root stays fixed.

    Per-step angle change is at most MAX_POSE_STEP by construction, and
    every pose stays within ANGLE_BOUNDS, which keeps FK inside the frame
    margin for all identity geometries in the sampling ranges.
    """
    if n < 1:
        raise ValueError("need at least one pose")
    g = rng._gen(derive_stream(WORLD_POSE, key))
    root = (float(g.uniform(15.0, 17.0)), float(g.uniform(21.5, 23.5)))
    lo, hi = ANGLE_BOUNDS[:, 0], ANGLE_BOUNDS[:, 1]
    angles = g.uniform(0.7 * lo, 0.7 * hi)
    poses = [Pose(root=root, joint_angles=angles.copy())]
    for _ in range(n - 1):
        step = g.uniform(-MAX_POSE_STEP, MAX_POSE_STEP, K_ANGLES)
        angles = np.clip(angles + step, lo, hi)
        poses.append(Pose(root=root, joint_angles=angles.copy()))
    return poses


def perturb_pose(pose: Pose, rng: Rng, magnitude: float, key: int = 0) -> Pose:
    """Clipped Gaussian jitter on joint angles, re-projected to validity."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return pose
    g = rng._gen(derive_stream(TRAIN_PERTURB, key))
    delta = g.normal(0.0, magnitude, K_ANGLES)
    delta = np.clip(delta, -3.0 * magnitude, 3.0 * magnitude)
    return valid_pose(pose.root, pose.joint_angles + delta)


# --------------------------------------------------------------------------
# Rendering (2x supersampled; pure functions of their inputs)

_SS = 2


def _grid(ss: int):
    c = (np.arange(SIZE * ss, dtype=np.float64) + 0.5) / ss - 0.5
    return np.meshgrid(c, c)


_PX, _PY = _grid(_SS)        # render grid
_PX4, _PY4 = _grid(2 * _SS)  # finer grid for the unbiased mask majority rule


def _seg_mask(a, b, half_width: float, px=_PX, py=_PY) -> np.ndarray:
    """Subpixel indicator of a capsule from a to b."""
    ab = np.asarray(b, dtype=np.float64) - a
    apx = px - a[0]
    apy = py - a[1]
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros_like(apx)
    else:
        t = np.clip((apx * ab[0] + apy * ab[1]) / denom, 0.0, 1.0)
    dx = apx - t * ab[0]
    dy = apy - t * ab[1]
    return dx * dx + dy * dy <= half_width * half_width


def _disc_mask(c, radius: float, px=_PX, py=_PY) -> np.ndarray:
    dx = px - c[0]
    dy = py - c[1]
    return dx * dx + dy * dy <= radius * radius


def _downsample(sub: np.ndarray) -> np.ndarray:
    ss = sub.shape[0] // SIZE
    return sub.reshape(SIZE, ss, SIZE, ss).mean(axis=(1, 3))


def _body_segments(j, width):
    half = width / 2.0
    return [
        (j["root"], j["neck"], half),
        (j["neck"], j["elbow_l"], half),
        (j["elbow_l"], j["hand_l"], half),
        (j["neck"], j["elbow_r"], half),
        (j["elbow_r"], j["hand_r"], half),
    ]


def _figure_masks(identity: Identity, pose: Pose, px=_PX, py=_PY):
    """Subpixel indicators (body capsules, skin discs) on the given grid."""
    j = fk(pose, identity.torso_length)
    body = np.zeros_like(px, dtype=bool)
    for a, b, half in _body_segments(j, identity.limb_width):
        body |= _seg_mask(a, b, half, px, py)
    skin = _disc_mask(j["head"], identity.head_radius, px, py)
    skin |= _disc_mask(j["hand_l"], HAND_RADIUS, px, py)
    skin |= _disc_mask(j["hand_r"], HAND_RADIUS, px, py)
    return body, skin


def render_frame(identity: Identity, pose: Pose) -> np.ndarray:
    """Rasterize one frame, [3, SIZE, SIZE] float32 in [0, 1].

    Draw order: background, body capsules, then head/hand discs on top.
    """
    body, skin = _figure_masks(identity, pose)
    out = np.empty((3, SIZE, SIZE), dtype=np.float32)
    for ch in range(3):
        sub = np.full_like(_PX, identity.background_color[ch])
        sub[body] = identity.body_color[ch]
        sub[skin] = identity.head_color[ch]
        out[ch] = _downsample(sub)
    return np.clip(out, 0.0, 1.0)


def foreground_mask(identity: Identity, pose: Pose) -> np.ndarray:
    """Binary {0,1} mask [1, SIZE, SIZE] of majority-figure pixels.

    Coverage is measured on a grid twice as fine as the render grid: at the
    render's own 2x sampling the quarter-quantized coverage makes a 0.5
    threshold systematically over-count edge pixels.
    """
    body, skin = _figure_masks(identity, pose, _PX4, _PY4)
    cover = _downsample((body | skin).astype(np.float64))
    return (cover >= 0.5).astype(np.float32)[None]


def render_condition(pose: Pose) -> np.ndarray:
    """White-on-black skeleton with joint markers, [1, SIZE, SIZE] float32.

    Uses the canonical skeleton, so the map depends only on the pose.
    Strokes sit at STROKE_LEVEL; markers are radial cones peaking at 1.0 on
    the joint and max-composited, so every joint keeps a strict local
    maximum even when two markers overlap (crossed hands).
    """
    j = fk(pose, CANON_TORSO)
    sub = np.zeros_like(_PX)
    for a, b, _ in _body_segments(j, 1.0):
        sub[_seg_mask(a, b, STROKE_HALF)] = STROKE_LEVEL
    for name in JOINT_NAMES:
        dx = _PX - j[name][0]
        dy = _PY - j[name][1]
        d = np.sqrt(dx * dx + dy * dy)
        cone = np.where(d <= MARKER_RADIUS,
                        1.0 - (1.0 - STROKE_LEVEL) * d / MARKER_RADIUS, 0.0)
        np.maximum(sub, cone, out=sub)
    return _downsample(sub).astype(np.float32)[None]


def head_box(pose: Pose, identity: Identity):
    """Square crop window (cx, cy, side) around the head, kept inside frame."""
    j = fk(pose, identity.torso_length)
    side = min(2.5 * identity.head_radius, float(SIZE))
    half = side / 2.0
    cx = float(np.clip(j["head"][0], half, SIZE - half))
    cy = float(np.clip(j["head"][1], half, SIZE - half))
    return cx, cy, side


# --------------------------------------------------------------------------
# Dataset assembly


@dataclass
class Clip:
    """Pre-rendered material for one identity: frames, conditions, masks."""

    identity: Identity
    poses: list
    frames: np.ndarray  # [N, 3, SIZE, SIZE]
    conds: np.ndarray   # [N, 1, SIZE, SIZE]
    masks: np.ndarray   # [N, 1, SIZE, SIZE]


def build_clip(identity: Identity, poses: list) -> Clip:
    frames = np.stack([render_frame(identity, p) for p in poses])
    conds = np.stack([render_condition(p) for p in poses])
    masks = np.stack([foreground_mask(identity, p) for p in poses])
    for p in poses:
        if not pose_in_bounds(p, identity.torso_length):
            raise ValueError("pose leaves the frame margin")
    return Clip(identity, list(poses), frames, conds, masks)
