"""Diffusion process definition.

Noise schedule tables, the forward noising map, the training-loss target,
DDPM/DDIM reverse steps, classifier-free guidance, and an analytic
test-oracle denoiser for Gaussian data.

Sampler functions operate on plain numpy arrays (inference never needs the
tape); eps_loss is tape-aware because training differentiates through it.
Schedule tables are kept in float64 and cast at the point of use, so chains
run in the dtype of their state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Tensor, mse


@dataclass(frozen=True)
class NoiseSchedule:
    """beta / alpha / alpha_bar tables, 1-based timesteps stored 0-based."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        """alpha_bar_t with the data-endpoint convention abar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; defaults match the training configuration."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if T > 1 and not (np.diff(alpha_bar) < 0).all():
        raise ValueError("alpha_bar must decrease strictly")
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: int, T: int):
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside 1..{T}")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    _check_t(t, sched.T)
    ab = sched.abar(t)
    return np.sqrt(ab, dtype=x0.dtype) * x0 + np.sqrt(1.0 - ab).astype(x0.dtype) * eps


def eps_loss(eps_pred: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error against the sampled noise (unit loss weight)."""
    if eps_pred.shape != eps.shape:
        raise ValueError("prediction and target shapes differ")
    return mse(eps_pred, Tensor(np.asarray(eps, dtype=eps_pred.dtype)))


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
              sched: NoiseSchedule, rng: Rng, stream: int) -> np.ndarray:
    """One ancestral step; noise sigma_t = sqrt(beta_t), silent at t = 1.

    The caller supplies the stream for the injected noise so draws stay keyed
    by (frame, timestep) context rather than call order.
    """
    _check_t(t, sched.T)
    i = t - 1
    a = sched.alpha[i]
    ab = sched.alpha_bar[i]
    coef = (1.0 - a) / np.sqrt(1.0 - ab)
    mean = (x_t - coef.astype(x_t.dtype) * eps_hat) / np.sqrt(a).astype(x_t.dtype)
    if t == 1:
        return mean.astype(x_t.dtype)
    z = rng.normal(stream, x_t.shape, dtype=x_t.dtype)
    return mean + np.sqrt(sched.beta[i]).astype(x_t.dtype) * z


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) step from t to t_prev; t_prev = 0 is the data end."""
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"invalid step pair ({t}, {t_prev})")
    ab = sched.abar(t)
    abp = sched.abar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab).astype(x_t.dtype) * eps_hat) / np.sqrt(ab).astype(x_t.dtype)
    return np.sqrt(abp).astype(x_t.dtype) * x0_hat + np.sqrt(1.0 - abp).astype(x_t.dtype) * eps_hat


def thresholded_eps(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                    sched: NoiseSchedule) -> np.ndarray:
    """Re-derive eps_hat after clamping the implied clean signal to [0, 1].

    The step formulas divide the eps error by sqrt(abar), which near t = T
    amplifies it by two orders of magnitude; an unconstrained estimate can
    then walk the chain outside the data range it can never recover from.
    Samplers over pixel data apply this before stepping.  The raw step
    functions stay unclamped so closed-form Gaussian traces stay exact.
    """
    _check_t(t, sched.T)
    ab = sched.abar(t)
    sq_ab = np.sqrt(ab).astype(x_t.dtype)
    sq_1ab = np.sqrt(1.0 - ab).astype(x_t.dtype)
    x0_hat = np.clip((x_t - sq_1ab * eps_hat) / sq_ab, 0.0, 1.0)
    return (x_t - sq_ab * x0_hat) / sq_1ab


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """Uniformly spaced (t, t_prev) pairs from T down to the data endpoint."""
    if not 1 <= steps <= T:
        raise ValueError("steps must be in 1..T")
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    pairs = list(zip(ts[:-1], ts[1:]))
    pairs.append((int(ts[-1]), 0))
    return [(int(a), int(b)) for a, b in pairs]


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("guidance operand shapes differ")
    return eps_uncond + np.asarray(scale, dtype=eps_uncond.dtype) * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance strength for cfg_combine.

    The null condition paired with this lives in the model: the learned
    placeholder appearance tokens plus an all-zero condition map.
    """

    scale: float = 7.5

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


def gaussian_oracle(x_t: np.ndarray, t: int, mu: float, var: float,
                    sched: NoiseSchedule) -> np.ndarray:
    """Exact optimal denoiser E[eps | x_t] for data ~ N(mu, var * I)."""
    if var < 0:
        raise ValueError("var must be >= 0")
    _check_t(t, sched.T)
    ab = sched.abar(t)
    denom = ab * var + (1.0 - ab)
    return (np.sqrt(1.0 - ab) / denom).astype(x_t.dtype) * (x_t - np.sqrt(ab).astype(x_t.dtype) * mu)
