"""Desk-scale evaluation: structure error, flicker, Fréchet distance, PSNR.

joint_error grounds the landmark-distance analog: the world guarantees that
the head and both hands are skin-colored discs, so landmarks are located by
a matched filter (disc-kernel mean of a color-similarity map) and compared
against forward-kinematics ground truth. Frames whose detection is
ambiguous are excluded, mirroring outlier dropping in landmark metrics.

frechet_features replaces a learned feature extractor with 19 handcrafted
statistics per frame; the Gaussian Fréchet form is kept exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import HAND_RADIUS, Identity, Pose, landmarks

CONFIDENCE_RATIO = 1.5  # accepted peak must beat the runner-up by this
MIN_PEAK = 0.3          # below the weakest legitimate blob response
_HAND_SUPPRESS = 2.0 * HAND_RADIUS + 2.0  # covers a merged two-hand blob
_SIM_WIDTH = 0.6        # color-similarity falloff, L2 in RGB


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# Landmark detection


def _disc_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = (x * x + y * y <= radius * radius).astype(np.float64)
    return k / k.sum()


def _filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0] // 2
    pad = np.pad(img, r)
    win = np.lib.stride_tricks.sliding_window_view(pad, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def _similarity(frame: np.ndarray, color) -> np.ndarray:
    d = np.linalg.norm(
        frame.astype(np.float64) - np.asarray(color).reshape(3, 1, 1), axis=0
    )
    return np.clip(1.0 - d / _SIM_WIDTH, 0.0, 1.0)


def _suppress(resp: np.ndarray, center, radius: float):
    h, w = resp.shape
    y, x = np.mgrid[0:h, 0:w]
    resp[(x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius * radius] = 0.0


def _refine(sim: np.ndarray, peak, radius: int = 2):
    """Similarity-weighted centroid around the peak pixel."""
    h, w = sim.shape
    x0, y0 = peak
    ys = slice(max(0, y0 - radius), min(h, y0 + radius + 1))
    xs = slice(max(0, x0 - radius), min(w, x0 + radius + 1))
    patch = sim[ys, xs]
    if patch.sum() <= 0:
        return float(x0), float(y0)
    gy, gx = np.mgrid[ys, xs]
    return float((patch * gx).sum() / patch.sum()), float((patch * gy).sum() / patch.sum())


def detect_landmarks(frame: np.ndarray, identity: Identity):
    """Locate (head, hand_a, hand_b) and a detection confidence.

    Returns (points [3, 2], confidence). Confidence is the smallest ratio of
    an accepted peak to the best rejected response; ambiguous frames score
    low and get excluded by joint_error.
    """
    sim = _similarity(frame, identity.head_color)
    head_resp = _filter2d(sim, _disc_kernel(identity.head_radius))
    iy, ix = np.unravel_index(np.argmax(head_resp), head_resp.shape)
    head_val = head_resp[iy, ix]
    head = _refine(sim, (ix, iy))
    rest = head_resp.copy()
    _suppress(rest, (ix, iy), 2.0 * identity.head_radius + 1.0)
    head_ratio = head_val / (rest.max() + 1e-12)

    hand_resp = _filter2d(sim, _disc_kernel(HAND_RADIUS))
    _suppress(hand_resp, (ix, iy), identity.head_radius + HAND_RADIUS)
    hands = []
    vals = []
    for _ in range(2):
        jy, jx = np.unravel_index(np.argmax(hand_resp), hand_resp.shape)
        vals.append(hand_resp[jy, jx])
        hands.append(_refine(sim, (jx, jy), radius=1))
        _suppress(hand_resp, (jx, jy), _HAND_SUPPRESS)
    hand_ratio = vals[1] / (hand_resp.max() + 1e-12)

    conf = min(head_ratio, hand_ratio)
    if min(head_val, vals[1]) < MIN_PEAK:
        conf = 0.0
    pts = np.array([head, hands[0], hands[1]], dtype=np.float64)
    return pts, float(conf)


def joint_error(frames, poses, identity: Identity) -> float:
    """Mean pixel distance between detected and FK landmarks.

    Hands are unordered in the image, so each frame scores the better of the
    two hand assignments. Frames with confidence below CONFIDENCE_RATIO are
    excluded; if every frame is excluded the metric is undefined.
    """
    if len(frames) != len(poses):
        raise MetricError("frames and poses must align")
    dists = []
    for frame, pose in zip(frames, poses):
        det, conf = detect_landmarks(frame, identity)
        if conf < CONFIDENCE_RATIO:
            continue
        truth = landmarks(pose, identity.torso_length)
        d_head = np.linalg.norm(det[0] - truth[0])
        straight = np.linalg.norm(det[1] - truth[1]) + np.linalg.norm(det[2] - truth[2])
        crossed = np.linalg.norm(det[1] - truth[2]) + np.linalg.norm(det[2] - truth[1])
        dists.append((d_head + min(straight, crossed)) / 3.0)
    if not dists:
        raise MetricError("every frame was excluded by detection confidence")
    return float(np.mean(dists))


# --------------------------------------------------------------------------
# Temporal flicker


def flicker(frames) -> float:
    """Mean squared second temporal difference; zero for linear motion."""
    x = np.asarray(frames, dtype=np.float64)
    if len(x) < 3:
        raise MetricError("flicker needs at least 3 frames")
    dd = x[2:] - 2.0 * x[1:-1] + x[:-2]
    return float(np.mean(dd * dd))


# --------------------------------------------------------------------------
# Fréchet distance on handcrafted features


def frame_features(frames) -> np.ndarray:
    """19 statistics per frame: 3 channel means, 3 channel variances,
    12 quadrant means, 1 edge energy."""
    x = np.asarray(frames, dtype=np.float64)
    n, c, h, w = x.shape
    feats = [x.mean(axis=(2, 3)), x.var(axis=(2, 3))]
    for ys in (slice(0, h // 2), slice(h // 2, h)):
        for xs in (slice(0, w // 2), slice(w // 2, w)):
            feats.append(x[:, :, ys, xs].mean(axis=(2, 3)))
    dx = np.diff(x, axis=3)
    dy = np.diff(x, axis=2)
    edge = (dx * dx).mean(axis=(1, 2, 3)) + (dy * dy).mean(axis=(1, 2, 3))
    feats.append(edge[:, None])
    return np.concatenate(feats, axis=1)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """d^2 = |mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses the symmetrized product sqrt(S1) S2 sqrt(S1), whose
    eigenvalues match those of S1 S2 but stay real by construction.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    diff = mu1 - mu2
    root1 = _sqrtm_psd(sigma1)
    inner = root1 @ sigma2 @ root1
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    d2 = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * cross
    return float(max(d2, 0.0))


def frechet_features(set_a, set_b) -> float:
    """Fréchet distance between feature Gaussians of two frame sets."""
    fa = frame_features(set_a)
    fb = frame_features(set_b)
    dim = fa.shape[1]
    if len(fa) < dim + 1 or len(fb) < dim + 1:
        raise MetricError(f"each set needs at least {dim + 1} frames")
    reg = 1e-6 * np.eye(dim)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    sig_a = np.cov(fa, rowvar=False) + reg
    sig_b = np.cov(fb, rowvar=False) + reg
    return frechet_gaussian(mu_a, sig_a, mu_b, sig_b)


# --------------------------------------------------------------------------
# PSNR and the report container


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0,1] signals, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError("psnr operands must share a shape")
    err = float(np.mean((a - b) ** 2))
    if err <= 0.0:
        return 99.0
    return float(min(10.0 * np.log10(1.0 / err), 99.0))


@dataclass
class EvalReport:
    joint_error_px: float
    flicker: float
    frechet: float
    psnr_db: float
    per_sequence: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "joint_error_px": self.joint_error_px,
            "flicker": self.flicker,
            "frechet": self.frechet,
            "psnr_db": self.psnr_db,
            "per_sequence": self.per_sequence,
        }
