"""Selective state-space recurrence and the four-path 2D scan unit.

The recurrence, per inner channel d with state size N::

    A_bar[t] = exp(delta[t,d] * A[d,:])          (zero-order hold)
    B_bar[t] = delta[t,d] * B[t,:]               (simplified Euler)
    h[t]     = A_bar[t] * h[t-1] + B_bar[t] * x[t,d]
    y[t,d]   = <C[t,:], h[t]> + d_skip[d] * x[t,d]

``A`` is kept strictly negative by parameterizing A = -exp(a_log), so
A_bar in (0, 1] for positive delta and the state cannot blow up.

The kernel runs the sequence loop in python with everything else
vectorized; the backward pass is the adjoint of the recurrence evaluated
in reverse time.  No parallel prefix-scan variant: the sequential
recurrence is the reference semantics.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .autograd import Parameter, Tensor, astensor, make_node
from .nn import DTYPE, DepthwiseConv3x3, LayerNorm, Linear, Module, _uniform
from .scanpaths import ScanPath

_CHUNK_ELEMS = 4_000_000  # cap on chunk temporaries (elements)


def discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization: (L,D),(D,N),(L,N) -> (L,D,N) pair."""
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive (softplus omitted upstream?)")
    a_bar = np.exp(delta[:, :, None] * A[None, :, :])
    b_bar = delta[:, :, None] * B[:, None, :]
    return a_bar, b_bar


def _chunk_steps(lead_elems: int, d: int, n: int, length: int) -> int:
    """Sequence steps per vectorized chunk, capped so chunk temporaries stay
    around a few million elements."""
    per_step = max(lead_elems * d * n, 1)
    return max(16, min(length, _CHUNK_ELEMS // per_step))


def _lane_buffers(lead, s, dn, dtype):
    """Padded (lead, K, M, D, N) lane buffers with flat (lead, K*M, D, N)
    views; identity elements (a=1, b=0) in the padded tail keep the carried
    state unchanged through the padding."""
    m = max(1, math.isqrt(s))
    k = (s + m - 1) // m
    ap = np.empty(lead + (k, m) + dn, dtype=dtype)
    bp = np.empty_like(ap)
    af = ap.reshape(lead + (k * m,) + dn)
    bf = bp.reshape(lead + (k * m,) + dn)
    if k * m > s:
        af[..., s:, :, :] = 1.0
        bf[..., s:, :, :] = 0.0
    return ap, bp, af, bf


def _lane_solve(ap: np.ndarray, bp: np.ndarray, h0: np.ndarray) -> None:
    """Solve h_t = a_t * h_{t-1} + b_t in place on lane buffers.

    ``bp`` is overwritten with the states h_t, ``ap`` is destroyed.  The
    chunk is split into ~sqrt(s) contiguous lanes scanned independently
    (sequential over the lane length, vectorized across lanes), then
    stitched with a sequential lane fixup: h = h_local + prefix_prod * h_in.
    Work stays O(s) and the schedule is fixed, so results are deterministic.
    """
    k, m = ap.shape[-4], ap.shape[-3]
    lead = ap.shape[:-4]
    dn = ap.shape[-2:]
    tmp = np.empty(lead + (k,) + dn, dtype=ap.dtype)
    for i in range(1, m):
        step_a = ap[..., :, i, :, :]
        np.multiply(step_a, bp[..., :, i - 1, :, :], out=tmp)
        bp[..., :, i, :, :] += tmp
        step_a *= ap[..., :, i - 1, :, :]  # prefix products
    hin = np.empty(lead + (k,) + dn, dtype=ap.dtype)
    hin[..., 0, :, :] = h0
    for j in range(1, k):
        hin[..., j, :, :] = bp[..., j - 1, m - 1, :, :] + ap[..., j - 1, m - 1, :, :] * hin[..., j - 1, :, :]
    np.multiply(ap, hin[..., :, None, :, :], out=ap)
    bp += ap


def _linrec_chunk(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Lane-solve one chunk given plain (lead, s, D, N) arrays; ``b`` is
    overwritten with the states and the final state is returned."""
    s = a.shape[-3]
    ap, bp, af, bf = _lane_buffers(a.shape[:-3], s, a.shape[-2:], a.dtype)
    af[..., :s, :, :] = a
    bf[..., :s, :, :] = b
    _lane_solve(ap, bp, h0)
    b[...] = bf[..., :s, :, :]
    return np.ascontiguousarray(bf[..., s - 1, :, :])


def _scan_forward(x, delta, A, Bm, Cm, need_states: bool):
    """Recurrence over axis -2.  x/delta: (..., L, D); A: (..., D, N)
    broadcastable over the leading axes; Bm/Cm: (..., L, N).

    Evaluated chunk-by-chunk with the lane solver; the state is carried
    sequentially across chunks, so the total work is linear in L.
    """
    L, D = x.shape[-2], x.shape[-1]
    N = A.shape[-1]
    lead = x.shape[:-2]
    lead_elems = int(np.prod(lead)) if lead else 1
    step = _chunk_steps(lead_elems, D, N, L)
    h0 = np.zeros(lead + (D, N), dtype=x.dtype)
    y = np.empty_like(x)
    hs = np.empty(lead + (L, D, N), dtype=x.dtype) if need_states else None
    for t0 in range(0, L, step):
        t1 = min(t0 + step, L)
        s = t1 - t0
        dl = delta[..., t0:t1, :, None]
        ap, bp, af, bf = _lane_buffers(lead, s, (D, N), x.dtype)
        av = af[..., :s, :, :]
        np.multiply(dl, np.broadcast_to(A[..., None, :, :], av.shape), out=av)
        np.exp(av, out=av)
        bv = bf[..., :s, :, :]
        np.multiply(dl, x[..., t0:t1, :, None], out=bv)
        bv *= Bm[..., t0:t1, None, :]
        _lane_solve(ap, bp, h0)  # bf now holds h_t for the chunk
        h0 = np.ascontiguousarray(bf[..., s - 1, :, :])
        states = bf[..., :s, :, :]
        y[..., t0:t1, :] = (states * Cm[..., t0:t1, None, :]).sum(axis=-1)
        if need_states:
            hs[..., t0:t1, :, :] = states
    return y, hs


def _scan_backward(gy, x, delta, A, Bm, Cm, hs):
    """Adjoint of the forward recurrence.

    The co-state obeys the reverse-time recurrence
    gh[t] = gy[t]*C[t] + dA[t+1]*gh[t+1]; it is computed with the same
    chunked lane solver on time-flipped arrays, after which every gradient
    is a vectorized elementwise contraction.  Only runs at training scale
    (it materializes (lead, L, D, N) temporaries).
    """
    L, D = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    N = A.shape[-1]
    dl = delta[..., :, :, None]
    dA = np.exp(dl * A[..., None, :, :])  # (lead, L, D, N)

    gyC = gy[..., :, :, None] * Cm[..., :, None, :]
    # reverse scan: flip time; the coefficient at flipped step s is dA[L-s]
    a_rev = np.roll(np.flip(dA, axis=-3), 1, axis=-3)
    a_rev[..., 0, :, :] = 0.0  # first flipped step has no carry
    b_rev = np.flip(gyC, axis=-3).copy()
    lead_elems = int(np.prod(lead)) if lead else 1
    step = _chunk_steps(lead_elems, D, N, L)
    carry = np.zeros(lead + (D, N), dtype=x.dtype)
    for t0 in range(0, L, step):
        t1 = min(t0 + step, L)
        carry = _linrec_chunk(a_rev[..., t0:t1, :, :], b_rev[..., t0:t1, :, :], carry)
    gh = np.flip(b_rev, axis=-3)  # (lead, L, D, N)

    h_prev = np.empty_like(hs)
    h_prev[..., 0, :, :] = 0.0
    h_prev[..., 1:, :, :] = hs[..., :-1, :, :]
    g_dA = gh * h_prev * dA
    ghB = (gh * Bm[..., :, None, :]).sum(axis=-1)
    gdelta = (g_dA * A[..., None, :, :]).sum(axis=-1) + ghB * x
    gA_full = (g_dA * dl).sum(axis=-3)
    gx = ghB * delta
    gB = (gh * (delta * x)[..., :, :, None]).sum(axis=-2)
    gC = (gy[..., :, :, None] * hs).sum(axis=-2)
    return gx, gdelta, gA_full, gB, gC


def ss_scan(x, delta, A, Bm, Cm, d_skip) -> Tensor:
    """Batched selective scan as a tape primitive with a bespoke adjoint.

    Shapes: x/delta (..., L, D); A (..., D, N) broadcastable over leading
    axes; Bm/Cm (..., L, N); d_skip broadcastable to (..., D).
    """
    x, delta, A, Bm, Cm, d_skip = map(astensor, (x, delta, A, Bm, Cm, d_skip))
    L, D = x.data.shape[-2], x.data.shape[-1]
    if delta.data.shape != x.data.shape:
        raise ValueError("delta must match x shape")
    if A.data.shape[-2] != D:
        raise ValueError("A channel extent disagrees with x")
    if Bm.data.shape[-2:] != (L, A.data.shape[-1]) or Cm.data.shape != Bm.data.shape:
        raise ValueError("B/C must be (..., L, N)")

    need_grad = any(p.requires_grad for p in (x, delta, A, Bm, Cm, d_skip))
    from . import autograd as _ag

    record = need_grad and _ag.grad_enabled()
    y_core, hs = _scan_forward(x.data, delta.data, A.data, Bm.data, Cm.data, record)
    y = y_core + x.data * d_skip.data
    if not record:
        return Tensor(y)

    def bwd(g):
        gx, gdelta, gA_full, gB, gC = _scan_backward(
            g, x.data, delta.data, A.data, Bm.data, Cm.data, hs
        )
        if x.requires_grad:
            x.accumulate_grad(gx + g * d_skip.data)
        if delta.requires_grad:
            delta.accumulate_grad(gdelta)
        if A.requires_grad:
            A.accumulate_grad(ops._unbroadcast(gA_full, A.data.shape))
        if Bm.requires_grad:
            Bm.accumulate_grad(gB)
        if Cm.requires_grad:
            Cm.accumulate_grad(gC)
        if d_skip.requires_grad:
            d_skip.accumulate_grad(ops._unbroadcast(g * x.data, d_skip.data.shape))

    return make_node(y, (x, delta, A, Bm, Cm, d_skip), bwd)


def selective_scan(x, delta, A, Bm, Cm, d_skip) -> Tensor:
    """Single-sequence scan: x/delta (L, D), A (D, N), Bm/Cm (L, N), d_skip (D)."""
    x = astensor(x)
    if x.data.ndim != 2:
        raise ValueError("selective_scan expects (L, D) input")
    return ss_scan(x, delta, A, Bm, Cm, d_skip)


def dt_bias_init(rng: np.random.Generator | None, shape, dt_min=1e-3, dt_max=1e-1, floor=1e-4) -> np.ndarray:
    """Bias such that softplus(bias) is log-uniform in [dt_min, dt_max]."""
    if rng is None:
        return np.zeros(shape, dtype=DTYPE)
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=shape))
    dt = np.maximum(dt, floor)
    return (dt + np.log(-np.expm1(-dt))).astype(DTYPE)  # softplus inverse


class Ss2d(Module):
    """One 2D-selective-scan unit: input projection and gate, optional
    depthwise conv, four independent per-direction SSM parameter sets,
    LayerNorm on the merged output, output projection.

    ``d_inner = round(ssm_ratio * channels)``; per-direction parameters are
    stacked on a leading axis of 4 so the four scans run as one batched
    recurrence.  The merge is an unweighted sum in fixed direction order.
    """

    def __init__(
        self,
        channels: int,
        d_state: int,
        dt_rank: int,
        ssm_ratio: float,
        with_dwconv: bool,
        rng: np.random.Generator | None,
    ):
        d = int(round(ssm_ratio * channels))
        self.channels = channels
        self.d_inner = d
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.in_proj = Linear(channels, 2 * d, rng)
        self.dw = DepthwiseConv3x3(d, rng) if with_dwconv else None
        self.w_x = Parameter(_uniform(rng, 1.0 / math.sqrt(d), (4, d, dt_rank + 2 * d_state)))
        self.w_dt = Parameter(_uniform(rng, dt_rank**-0.5, (4, dt_rank, d)))
        self.dt_bias = Parameter(dt_bias_init(rng, (4, d)))
        if rng is None:
            a_log = np.zeros((4, d, d_state), dtype=DTYPE)
        else:
            a_log = np.log(np.arange(1, d_state + 1, dtype=np.float64))
            a_log = np.broadcast_to(a_log, (4, d, d_state)).astype(DTYPE).copy()
        self.a_log = Parameter(a_log)  # A = -exp(a_log), S4D-real init
        self.d_skip = Parameter(np.ones((4, 1, 1, d), dtype=DTYPE))
        self.out_norm = LayerNorm(d)
        self.out_proj = Linear(d, channels, rng)

    def __call__(self, tokens: Tensor, paths: tuple[ScanPath, ...], hw: tuple[int, int]) -> Tensor:
        """tokens: (B, L, C) with L == len(path); returns (B, L, C).

        ``hw`` is the native 2D arrangement of each sequence batch entry,
        needed only when the internal depthwise conv is enabled.
        """
        b, l, c = tokens.data.shape
        if c != self.channels:
            raise ValueError(f"channel mismatch: got {c}, unit built for {self.channels}")
        if len(paths) != 4:
            raise ValueError("need exactly 4 scan paths")
        if any(len(p) != l for p in paths):
            raise ValueError(f"path length mismatch: tokens {l}, paths {[len(p) for p in paths]}")
        d = self.d_inner

        xz = self.in_proj(tokens)
        x = ops.slice_last(xz, 0, d)
        z = ops.slice_last(xz, d, 2 * d)

        if self.dw is not None:
            hh, ww = hw
            x = ops.transpose(ops.reshape(x, (b, hh, ww, d)), (0, 3, 1, 2))
            x = self.dw(x)
            x = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, l, d))
        x = ops.silu(x)

        seqs = ops.stack([ops.gather_tokens(x, p.forward, p.inverse) for p in paths], axis=0)
        proj = ops.dir_project(seqs, self.w_x)  # (4, B, L, dt_rank + 2N)
        n = self.d_state
        dt_lat = ops.slice_last(proj, 0, self.dt_rank)
        bm = ops.slice_last(proj, self.dt_rank, self.dt_rank + n)
        cm = ops.slice_last(proj, self.dt_rank + n, self.dt_rank + 2 * n)
        delta = ops.softplus(ops.add(ops.dir_project(dt_lat, self.w_dt), ops.reshape(self.dt_bias, (4, 1, 1, d))))
        a = ops.neg(ops.exp(ops.reshape(self.a_log, (4, 1, d, self.d_state))))
        ys = ss_scan(seqs, delta, a, bm, cm, self.d_skip)  # (4, B, L, D)

        merged = None
        for i, p in enumerate(paths):
            back = ops.gather_tokens(ops.take_axis0(ys, i), p.inverse, p.forward)
            merged = back if merged is None else ops.add(merged, back)
        merged = self.out_norm(merged)
        gated = ops.mul(merged, ops.silu(z))
        return self.out_proj(gated)
