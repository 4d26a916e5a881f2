"""Differentiable primitive operators.

Every public function takes/returns ``autograd.Tensor`` and registers a
backward closure on the tape.  The op set is exactly what the network
needs: affine maps, 3x3/1x1 convolutions (stride 1), depthwise 3x3,
layer norm, the gate/delta activations, permutation moves and reductions.
No general broadcasting engine beyond numpy's own rules.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, astensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return make_node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return make_node(-a.data, (a,), bwd)


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return make_node(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return make_node(np.abs(a.data), (a,), bwd)


def sum_all(a) -> Tensor:
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))

    return make_node(a.data.sum(), (a,), bwd)


def mean_all(a) -> Tensor:
    a = astensor(a)
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / n, a.data.shape))

    return make_node(a.data.mean(), (a,), bwd)


# ---------------------------------------------------------------------------
# shape moves


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return make_node(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = astensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return make_node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return make_node(out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(np.take(g, i, axis=axis))

    return make_node(out, tuple(tensors), bwd)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Slice along the last axis; backward scatters into a zero tensor."""
    a = astensor(a)
    out = np.ascontiguousarray(a.data[..., start:stop])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            a.accumulate_grad(full)

    return make_node(out, (a,), bwd)


def take_axis0(a, i: int) -> Tensor:
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i] = g
            a.accumulate_grad(full)

    return make_node(np.ascontiguousarray(a.data[i]), (a,), bwd)


def gather_tokens(a, perm: np.ndarray, inv: np.ndarray) -> Tensor:
    """Reorder axis 1 by the bijection ``perm`` (``inv`` is its inverse)."""
    a = astensor(a)
    out = np.ascontiguousarray(a.data[:, perm])

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, inv])

    return make_node(out, (a,), bwd)


def pixel_shuffle(a, upscale: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, r*H, r*W); channel block (c, i, j) feeds
    output pixel (r*h + i, r*w + j) of channel c."""
    a = astensor(a)
    r = int(upscale)
    b, crr, hh, ww = a.data.shape
    if crr % (r * r) != 0:
        raise ValueError(f"channel count {crr} not divisible by {r}**2")
    c = crr // (r * r)
    out = (
        a.data.reshape(b, c, r, r, hh, ww)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, c, hh * r, ww * r)
    )

    def bwd(g):
        if a.requires_grad:
            gg = (
                g.reshape(b, c, hh, r, ww, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(b, crr, hh, ww)
            )
            a.accumulate_grad(gg)

    return make_node(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# affine maps


def matmul(a, w) -> Tensor:
    """(..., K) @ (K, M) -> (..., M).  Weight must be 2-D."""
    a, w = astensor(a), astensor(w)
    if w.data.ndim != 2:
        raise ValueError("matmul weight must be 2-D")
    if a.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"inner dims disagree: {a.data.shape[-1]} vs {w.data.shape[0]}")
    out = a.data @ w.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            k = w.data.shape[0]
            w.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return make_node(out, (a, w), bwd)


def linear(x, w, b=None) -> Tensor:
    """Affine map per token: x @ w (+ b)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def dir_project(x, w) -> Tensor:
    """Per-direction projection: (G, B, L, K) x (G, K, M) -> (G, B, L, M)."""
    x, w = astensor(x), astensor(w)
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ValueError("dir_project expects (G,B,L,K) and (G,K,M)")
    g_, b_, l_, k_ = x.data.shape
    m_ = w.data.shape[-1]
    out = (x.data.reshape(g_, b_ * l_, k_) @ w.data).reshape(g_, b_, l_, m_)

    def bwd(g):
        g2 = g.reshape(g_, b_ * l_, m_)
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.transpose(0, 2, 1)).reshape(x.data.shape))
        if w.requires_grad:
            w.accumulate_grad(x.data.reshape(g_, b_ * l_, k_).transpose(0, 2, 1) @ g2)

    return make_node(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (s + a.data * s * (1.0 - s)))

    return make_node(out, (a,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = astensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du))

    return make_node(out, (a,), bwd)


def softplus(a) -> Tensor:
    """ln(1 + e^x) with the overflow-safe max(x,0) + log1p(exp(-|x|)) form."""
    a = astensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * _sigmoid(x))

    return make_node(out, (a,), bwd)


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    c = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            s1 = gh.sum(axis=-1, keepdims=True)
            s2 = (gh * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad(inv / c * (c * gh - s1 - xhat * s2))

    return make_node(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution (stride 1; 'same' zero padding or 'valid')

_COL_CHUNK_ELEMS = 8_000_000  # cap on the materialized im2col buffer


def _conv2d_np(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: str) -> np.ndarray:
    """Cross-correlation via im2col + matmul (BLAS path), any stride."""
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    bsz, _, ho, wo = win.shape[:4]
    w2 = w.reshape(co, -1).T
    out = np.empty((bsz, ho, wo, co), dtype=x.dtype)
    # bound the materialized im2col buffer (large convs stream in row chunks)
    rows = max(1, min(ho, _COL_CHUNK_ELEMS // max(1, wo * ci * kh * kw)))
    for r0 in range(0, ho, rows):
        r1 = min(r0 + rows, ho)
        cols = np.ascontiguousarray(win[:, :, r0:r1].transpose(0, 2, 3, 1, 4, 5))
        out[:, r0:r1] = (cols.reshape(-1, ci * kh * kw) @ w2).reshape(bsz, r1 - r0, wo, co)
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation.  The differentiable path supports stride 1;
    larger strides are forward-only (the network never trains through them)."""
    x, w = astensor(x), astensor(w)
    bt = astensor(b) if b is not None else None
    out = _conv2d_np(x.data, w.data, bt.data if bt is not None else None, stride, padding)
    if stride != 1:
        if x.requires_grad or w.requires_grad:
            raise NotImplementedError("conv2d backward implemented for stride 1 only")
        return Tensor(out)

    co, ci, kh, kw = w.data.shape
    hh, ww = x.data.shape[2], x.data.shape[3]
    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)

    def bwd(g):
        if bt is not None and bt.requires_grad:
            bt.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if padding == "same" else x.data
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            bsz, _, ho, wo = win.shape[:4]
            gw = np.zeros((ci * kh * kw, co), dtype=g.dtype)
            rows = max(1, min(ho, _COL_CHUNK_ELEMS // max(1, wo * ci * kh * kw)))
            for r0 in range(0, ho, rows):
                r1 = min(r0 + rows, ho)
                cols = np.ascontiguousarray(win[:, :, r0:r1].transpose(0, 2, 3, 1, 4, 5))
                gw += cols.reshape(-1, ci * kh * kw).T @ g[:, :, r0:r1].transpose(0, 2, 3, 1).reshape(-1, co)
            w.accumulate_grad(np.ascontiguousarray(gw.T.reshape(co, ci, kh, kw)))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx_full = _conv2d_np(gp, wt, None, 1, "valid")  # padded-input-sized
            x.accumulate_grad(gx_full[:, :, ph : ph + hh, pw : pw + ww])

    parents = (x, w) if bt is None else (x, w, bt)
    return make_node(out, parents, bwd)


def _dwconv3x3_np(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    c = x.shape[1]
    if w.shape != (c, 3, 3):
        raise ValueError(f"need one 3x3 kernel per channel, got {w.shape} for {c} channels")
    hh, ww = x.shape[2], x.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for p in range(3):  # nine shifted multiply-adds beat an einsum here
        for q in range(3):
            out += w[None, :, p, q, None, None] * xp[:, :, p : p + hh, q : q + ww]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def dwconv3x3(x, w, b=None) -> Tensor:
    """Depthwise 3x3, stride 1, same padding: channel i sees only kernel i."""
    x, w = astensor(x), astensor(w)
    bt = astensor(b) if b is not None else None
    out = _dwconv3x3_np(x.data, w.data, bt.data if bt is not None else None)
    hh, ww = x.data.shape[2], x.data.shape[3]

    def bwd(g):
        if bt is not None and bt.requires_grad:
            bt.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gw = np.empty_like(w.data)
            for p in range(3):
                for q in range(3):
                    gw[:, p, q] = (xp[:, :, p : p + hh, q : q + ww] * g).sum(axis=(0, 2, 3))
            w.accumulate_grad(gw)
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gx = np.zeros_like(x.data)
            wf = w.data[:, ::-1, ::-1]
            for p in range(3):
                for q in range(3):
                    gx += wf[None, :, p, q, None, None] * gp[:, :, p : p + hh, q : q + ww]
            x.accumulate_grad(gx)

    parents = (x, w) if bt is None else (x, w, bt)
    return make_node(out, parents, bwd)
