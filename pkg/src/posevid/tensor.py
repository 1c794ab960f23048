"""Dense tensors with reverse-mode gradients on an explicit tape.

Storage is float32 (float64 allowed everywhere for verification runs; ops
follow the dtype of their inputs). Gradients are recorded only while a
GradTape is active, so inference pays no bookkeeping cost.

Summation order is fixed: kernels lower to row-major matrix products and
serial numpy reductions, which makes bit-exactness across code paths a
meaningful notion (the equivalence tests elsewhere rely on it).

A small FLOP-counting facility is included; matrix-multiply and convolution
kernels report 2*m*k*n style counts into any active scopes. The attention
helpers open an "attention" scope so callers can measure how attention cost
scales with batch shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Raised when a value leaves the finite-float contract."""


class Tensor:
    """N-dimensional float array, the universal value type of this package."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # Operator sugar; everything routes through the tape-aware functions.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericsError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# Tape

_ACTIVE_TAPE: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops, replayed backward for gradients.

    Records are (output, inputs, vjp) triples. The reverse sweep visits each
    record once, so every parameter's gradient is produced exactly once.
    Gradient accumulation is out-of-place, which keeps aliasing between
    upstream buffers and freshly produced cotangents harmless.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self._records.append((out, inputs, vjp))

    def __len__(self):
        return len(self._records)

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar loss with respect to each tensor in params."""
        if loss.size != 1:
            raise ValueError("loss must be a scalar")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for out, inputs, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        return [
            np.array(grads[id(p)], dtype=p.dtype) if id(p) in grads
            else np.zeros_like(p.data)
            for p in params
        ]


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _ACTIVE_TAPE:
        _ACTIVE_TAPE[-1].record(out, inputs, vjp)
    return out


# --------------------------------------------------------------------------
# FLOP accounting

_FLOP_SCOPES: list[dict] = []


class flop_scope:
    """Context manager accumulating matmul/conv FLOPs into .counts."""

    def __init__(self):
        self.counts: dict[str, int] = {"total": 0, "attention": 0}

    def __enter__(self):
        _FLOP_SCOPES.append(self.counts)
        return self

    def __exit__(self, *exc):
        _FLOP_SCOPES.pop()
        return False


_ATTN_DEPTH = [0]


class _attention_region:
    def __enter__(self):
        _ATTN_DEPTH[0] += 1

    def __exit__(self, *exc):
        _ATTN_DEPTH[0] -= 1
        return False


def _add_flops(n: int):
    if _FLOP_SCOPES:
        attn = _ATTN_DEPTH[0] > 0
        for counts in _FLOP_SCOPES:
            counts["total"] += n
            if attn:
                counts["attention"] += n


# --------------------------------------------------------------------------
# Broadcasting helper


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to the given input shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise and linear-algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    return _record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)  # numpy scalars would upcast float32 operands
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = Tensor(root)
    return _record(out, (a,), lambda g: (g * (0.5 / root),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)
    return _record(
        out, (a,),
        lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    _add_flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return _record(
        out, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def sum_op(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g if np.isscalar(g) else g.reshape(()), dtype=g.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean_op(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g.reshape(()) / count, dtype=g.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _record(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), vjp)


def split_rows(a: Tensor, parts: int) -> list[Tensor]:
    """Split axis 0 into equal parts (inverse of concat on axis 0)."""
    if a.shape[0] % parts:
        raise ValueError("rows not divisible by parts")
    chunk = a.shape[0] // parts
    outs = [Tensor(np.ascontiguousarray(a.data[i * chunk:(i + 1) * chunk]))
            for i in range(parts)]
    if _ACTIVE_TAPE:
        for i, out in enumerate(outs):
            lo = i * chunk

            def vjp(g, lo=lo):
                full = np.zeros_like(a.data)
                full[lo:lo + chunk] = g
                return (full,)

            _record(out, (a,), vjp)
    return outs


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis; outputs sum to 1 along that axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v for 2-D token matrices.

    q: [L_q, d], k: [L_k, d], v: [L_k, d_v]. Jointly permuting rows of k and
    v leaves the output unchanged (softmax weights follow the permutation).
    """
    if q.shape[1] != k.shape[1]:
        raise ValueError("query/key widths differ")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key/value row counts differ")
    with _attention_region():
        logits = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[1]))
        weights = softmax(logits, axis=-1)
        return matmul(weights, v)


# --------------------------------------------------------------------------
# Convolution and resampling


def _im2col(xp: np.ndarray, k: int, s: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    B, C, Ho, Wo = win.shape[:4]
    cols = np.ascontiguousarray(
        win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * Ho * Wo)
    )
    return cols, Ho, Wo


def _col2im(dcols: np.ndarray, B: int, C: int, Hp: int, Wp: int,
            k: int, s: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    dxp = np.zeros((B, C, Hp, Wp), dtype=dcols.dtype)
    d6 = dcols.reshape(C, k, k, B, Ho, Wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += d6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad:Hp - pad, pad:Wp - pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding over [B, C, H, W] inputs.

    A rank-3 [C, H, W] input is treated as a batch of one and the output is
    returned rank-3. Kernel w is [C_out, C_in, k, k] with k odd. Output
    spatial size must be integral: (H + 2*pad - k) / stride + 1.
    """
    if len(x.shape) == 3:
        y = conv2d(reshape(x, (1, *x.shape)), w, b, stride=stride, pad=pad)
        return reshape(y, y.shape[1:])
    B, C, H, W = x.shape
    Co, Ci, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd side")
    if Ci != C:
        raise ValueError(f"kernel expects {Ci} input channels, got {C}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ValueError("non-integral output size")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, Ho, Wo = _im2col(xp, k, stride)
    W2 = w.data.reshape(Co, Ci * k * k)
    out2 = W2 @ cols
    _add_flops(2 * Co * Ci * k * k * B * Ho * Wo)
    y = np.ascontiguousarray(out2.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3))
    if b is not None:
        y = y + b.data.reshape(1, Co, 1, 1)
    out = Tensor(y)
    Hp, Wp = H + 2 * pad, W + 2 * pad

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3).reshape(Co, B * Ho * Wo))
        dw = (g2 @ cols.T).reshape(w.shape)
        dcols = W2.T @ g2
        dx = _col2im(dcols, B, C, Hp, Wp, k, stride, pad, Ho, Wo)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, vjp)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling of [B, C, H, W] with even H, W."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError("avg_pool2 needs even spatial sizes")
    xr = reshape(x, (B, C, H // 2, 2, W // 2, 2))
    return mean_op(xr, axis=(3, 5))


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of [B, C, H, W]."""
    B, C, H, W = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def vjp(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), vjp)


# --------------------------------------------------------------------------
# Composite layers used by the networks


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[N, d_in] @ w[d_in, d_out] (+ b)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 4,
               eps: float = 1e-5) -> Tensor:
    """GroupNorm over [B, C, H, W], composed from primitives."""
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError("channels not divisible by groups")
    xg = reshape(x, (B, groups, (C // groups) * H * W))
    m = mean_op(xg, axis=2, keepdims=True)
    centered = sub(xg, m)
    var = mean_op(mul(centered, centered), axis=2, keepdims=True)
    inv = div(centered, sqrt(add(var, Tensor(np.asarray(eps, dtype=x.dtype)))))
    xn = reshape(inv, (B, C, H, W))
    return add(mul(xn, reshape(gamma, (1, C, 1, 1))), reshape(beta, (1, C, 1, 1)))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return mean_op(mul(d, d))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-4, samples: int | None = None,
               seed: int = 0) -> float:
    """Worst relative error of tape gradients vs central finite differences.

    f must re-read the given parameter tensors on every call; their data is
    perturbed in place coordinate by coordinate. Run with float64 parameters,
    otherwise the difference quotient itself drowns in rounding error.
    samples limits the number of coordinates probed per tensor (a fixed
    seeded choice); None sweeps every coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with GradTape() as tape:
        loss = f()
    if loss.size != 1:
        raise ValueError("f must return a scalar")
    if not np.isfinite(loss.data).all():
        raise NumericsError("f is not finite at the given parameters")
    grads = tape.gradients(loss, params)
    pickers = np.random.Generator(np.random.Philox(key=[seed, 0]))
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gf = np.asarray(g, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            idx = np.sort(pickers.choice(flat.size, size=samples,
                                         replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(num - gf[i]) / max(abs(num), abs(gf[i]), 1e-6)
            worst = max(worst, err)
    return worst
