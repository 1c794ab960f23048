"""File formats for run artifacts.

Frames are binary PPM (P6) and single-channel maps binary PGM (P5), both
8-bit; poses, identities, datasets, metrics, and manifests are JSON. Every
writer is deterministic byte-for-byte for a given input, which is what lets
whole pipeline runs be compared with a plain file diff.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..world import Clip, Identity, Pose


def write_ppm(path, frame: np.ndarray) -> None:
    """frame [3, H, W] in [0, 1] -> 8-bit binary PPM."""
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("PPM frames must be [3, H, W]")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(q.transpose(1, 2, 0).tobytes())


def write_pgm(path, plane: np.ndarray) -> None:
    """plane [H, W] or [1, H, W] in [0, 1] -> 8-bit binary PGM."""
    arr = np.asarray(plane)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError("PGM planes must have one channel")
        arr = arr[0]
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(q.tobytes())


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} image")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with # comments allowed, then one whitespace byte before raster data.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported")
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * ch, offset=pos)
    return data, h, w


def read_ppm(path) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P6")
    rgb = data.reshape(h, w, 3).transpose(2, 0, 1)
    return (rgb.astype(np.float32) / 255.0)


def read_pgm(path) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P5")
    return (data.reshape(1, h, w).astype(np.float32) / 255.0)


# --------------------------------------------------------------------------
# World objects as JSON


def identity_to_dict(identity: Identity) -> dict:
    return {
        "body_color": [float(c) for c in identity.body_color],
        "head_color": [float(c) for c in identity.head_color],
        "background_color": [float(c) for c in identity.background_color],
        "limb_width": float(identity.limb_width),
        "head_radius": float(identity.head_radius),
        "torso_length": float(identity.torso_length),
    }


def identity_from_dict(d: dict) -> Identity:
    return Identity(
        body_color=tuple(d["body_color"]),
        head_color=tuple(d["head_color"]),
        background_color=tuple(d["background_color"]),
        limb_width=d["limb_width"],
        head_radius=d["head_radius"],
        torso_length=d["torso_length"],
    )


def poses_to_list(poses) -> list:
    return [{"root": [float(p.root[0]), float(p.root[1])],
             "joint_angles": [float(a) for a in p.joint_angles]}
            for p in poses]


def poses_from_list(items) -> list:
    return [Pose(root=tuple(d["root"]),
                 joint_angles=np.array(d["joint_angles"], dtype=np.float64))
            for d in items]


def write_json(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


# --------------------------------------------------------------------------
# Clip directories


def save_clip(dirpath, clip: Clip) -> None:
    d = Path(dirpath)
    for sub in ("frames", "conds", "masks"):
        os.makedirs(d / sub, exist_ok=True)
    write_json(d / "identity.json", identity_to_dict(clip.identity))
    write_json(d / "poses.json", {"poses": poses_to_list(clip.poses)})
    for i in range(len(clip.frames)):
        write_ppm(d / "frames" / f"{i:03d}.ppm", clip.frames[i])
        write_pgm(d / "conds" / f"{i:03d}.pgm", clip.conds[i])
        write_pgm(d / "masks" / f"{i:03d}.pgm", clip.masks[i])


def load_clip(dirpath) -> Clip:
    d = Path(dirpath)
    identity = identity_from_dict(read_json(d / "identity.json"))
    poses = poses_from_list(read_json(d / "poses.json")["poses"])
    n = len(poses)
    frames = np.stack([read_ppm(d / "frames" / f"{i:03d}.ppm")
                       for i in range(n)])
    conds = np.stack([read_pgm(d / "conds" / f"{i:03d}.pgm")
                      for i in range(n)])
    masks = np.stack([read_pgm(d / "masks" / f"{i:03d}.pgm")
                      for i in range(n)])
    return Clip(identity, poses, frames, conds, masks)


def save_frames(dirpath, frames: np.ndarray) -> None:
    d = Path(dirpath)
    os.makedirs(d, exist_ok=True)
    for i in range(len(frames)):
        write_ppm(d / f"{i:03d}.ppm", frames[i])


def load_frames(dirpath) -> np.ndarray:
    d = Path(dirpath)
    names = sorted(p.name for p in d.iterdir() if p.suffix == ".ppm")
    if not names:
        raise ValueError(f"no frames under {d}")
    return np.stack([read_ppm(d / n) for n in names])
