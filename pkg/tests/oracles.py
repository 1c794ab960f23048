"""Independent reference implementations used to freeze expected test values.

Everything here is deliberately written with different algorithms from the
package code (nested loops instead of stride tricks, closed-form moment
propagation instead of sampling, scipy instead of hand-rolled linear
algebra) so agreement is evidence rather than tautology.
"""

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    """Six-nested-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    n, ci, h, wd = x.shape
    co, ci2, k, k2 = w.shape
    assert ci == ci2 and k == k2
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for oc in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(ci):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (xp[bi, ic, oy * stride + ky,
                                           ox * stride + kx]
                                        * w[oc, ic, ky, kx])
                    out[bi, oc, oy, ox] = acc
    if b is not None:
        out += np.asarray(b, dtype=np.float64).reshape(1, co, 1, 1)
    return out


# --------------------------------------------------------------------------
# Closed-form moment propagation for oracle-driven reverse chains.
#
# For data ~ N(mu, var) the optimal denoiser is affine in x_t, so every
# sampler step is an affine map plus (for DDPM) independent noise. The
# endpoint mean/variance of a whole chain therefore has an exact recursion;
# no Monte-Carlo error.


def _oracle_coeffs(sched, t, mu, var):
    """eps_hat = g * (x - sqrt(abar)*mu); returns (g, sqrt(abar))."""
    ab = sched.abar(t)
    d = ab * var + 1.0 - ab
    return math.sqrt(1.0 - ab) / d, math.sqrt(ab)


def ddpm_chain_moments(sched, mu, var, init_mean=0.0, init_var=1.0):
    """Exact endpoint (mean, variance) of a full oracle-driven DDPM chain."""
    m, v = init_mean, init_var
    for t in range(sched.T, 0, -1):
        alpha = sched.alpha[t - 1]
        beta = sched.beta[t - 1]
        ab = sched.abar(t)
        g, sab = _oracle_coeffs(sched, t, mu, var)
        coef = (1.0 - alpha) / math.sqrt(1.0 - ab)
        a = (1.0 - coef * g) / math.sqrt(alpha)
        b = coef * g * sab * mu / math.sqrt(alpha)
        m = a * m + b
        v = a * a * v + (beta if t > 1 else 0.0)
    return m, v


def ddim_chain_moments(sched, pairs, mu, var, init_mean=0.0, init_var=1.0):
    """Exact endpoint (mean, variance) of an oracle-driven DDIM chain."""
    m, v = init_mean, init_var
    for t, t_prev in pairs:
        ab = sched.abar(t)
        abp = sched.abar(t_prev)
        g, sab = _oracle_coeffs(sched, t, mu, var)
        # x0_hat = (x - sqrt(1-ab)*eps_hat)/sqrt(ab); next = sqrt(abp)*x0_hat
        # + sqrt(1-abp)*eps_hat, all affine in x.
        c0 = (1.0 - math.sqrt(1.0 - ab) * g) / sab
        d0 = math.sqrt(1.0 - ab) * g * sab * mu / sab
        a = math.sqrt(abp) * c0 + math.sqrt(1.0 - abp) * g
        b = math.sqrt(abp) * d0 - math.sqrt(1.0 - abp) * g * sab * mu
        m = a * m + b
        v = a * a * v
    return m, v


def frechet_oracle(feats_a, feats_b) -> float:
    """Fréchet distance via scipy's Schur-method matrix square root."""
    from scipy import linalg

    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    reg = 1e-6 * np.eye(fa.shape[1])
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    sig_a = np.cov(fa, rowvar=False) + reg
    sig_b = np.cov(fb, rowvar=False) + reg
    cross, _ = linalg.sqrtm(sig_a @ sig_b, disp=False)
    diff = mu_a - mu_b
    d2 = (diff @ diff + np.trace(sig_a) + np.trace(sig_b)
          - 2.0 * np.trace(cross.real))
    return float(max(d2, 0.0))
