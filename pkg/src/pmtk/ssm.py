"""Selective state-space token mixing.

The core recurrence, per channel d with hidden state h in R^S:

    abar_t = exp(delta_t[d] * A[d])          elementwise over S
    h_t    = abar_t * h_{t-1} + delta_t[d] * B_t * x_t[d]
    y_t[d] = <C_t, h_t> + D_skip[d] * x_t[d]

delta, B, C are input-dependent (selective) linear projections of the token
sequence; delta goes through a softplus and A is stored as -exp(A_log), which
keeps abar inside (0, 1). ``scan_sequential`` is the plain-loop definition
used as the oracle; ``scan_core`` vectorizes everything except the time loop
and carries a hand-derived backward pass.

``vim_block`` is the residual token mixer built on two scan directions:
norm -> parallel input/gate projections -> short depthwise conv + SiLU ->
forward scan + reversed scan -> sum -> gate -> output projection -> + input.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


# ---------------------------------------------------------------------------
# Scan forward/backward kernels (plain numpy)
# ---------------------------------------------------------------------------

def scan_forward_np(u, delta, A, B, C, Dskip, want_state: bool = False):
    """Vectorized scan over [Bn, L, D] inputs; loops only over time."""
    Bn, L, D = u.shape
    S = A.shape[1]
    abar = np.exp(delta[..., None] * A[None, None])          # [Bn,L,D,S]
    binp = (delta * u)[..., None] * B[:, :, None, :]         # [Bn,L,D,S]
    H = np.empty((Bn, L, D, S), dtype=u.dtype)
    h = np.zeros((Bn, D, S), dtype=u.dtype)
    for t in range(L):
        h = abar[:, t] * h + binp[:, t]
        H[:, t] = h
    y = np.einsum("bls,blds->bld", C, H) + Dskip * u
    if want_state:
        return y, H, abar
    return y


def scan_backward_np(gy, u, delta, A, B, C, Dskip, H, abar):
    """Adjoint of scan_forward_np; returns gradients for all six inputs."""
    Bn, L, D = u.shape
    gDskip = np.einsum("bld,bld->d", gy, u)
    gu = gy * Dskip
    gC = np.einsum("bld,blds->bls", gy, H)
    gdelta = np.empty_like(delta)
    gB = np.empty_like(B)
    gA = np.zeros_like(A)
    G = np.zeros((Bn, D, A.shape[1]), dtype=u.dtype)
    for t in range(L - 1, -1, -1):
        G = gy[:, t, :, None] * C[:, t, None, :] + (abar[:, t + 1] * G if t + 1 < L else 0.0)
        hprev = H[:, t - 1] if t > 0 else 0.0
        gabar_abar = G * hprev * abar[:, t]                  # d/d(delta*A) terms
        GB = np.einsum("bds,bs->bd", G, B[:, t])
        gdelta[:, t] = np.einsum("bds,ds->bd", gabar_abar, A) + u[:, t] * GB
        gu[:, t] += delta[:, t] * GB
        gB[:, t] = np.einsum("bds,bd->bs", G, delta[:, t] * u[:, t])
        gA += np.einsum("bds,bd->ds", gabar_abar, delta[:, t])
    return gu, gdelta, gA, gB, gC, gDskip


def scan_sequential(u, delta, A, B, C, Dskip):
    """Definitional recurrence, looped per batch item, time step and channel."""
    Bn, L, D = u.shape
    S = A.shape[1]
    y = np.zeros_like(u)
    for b in range(Bn):
        for d in range(D):
            h = np.zeros(S, dtype=u.dtype)
            for t in range(L):
                abar = np.exp(delta[b, t, d] * A[d])
                h = abar * h + delta[b, t, d] * B[b, t] * u[b, t, d]
                y[b, t, d] = C[b, t] @ h + Dskip[d] * u[b, t, d]
    return y


def scan_core(u: T.Tensor, delta: T.Tensor, A: T.Tensor, B: T.Tensor,
              C: T.Tensor, Dskip: T.Tensor) -> T.Tensor:
    """Tape-recorded scan over [Bn, L, D] with custom adjoint."""
    y, H, abar = scan_forward_np(u.data, delta.data, A.data, B.data, C.data,
                                 Dskip.data, want_state=True)

    def bwd(gy):
        return scan_backward_np(gy, u.data, delta.data, A.data, B.data,
                                C.data, Dskip.data, H, abar)

    return T.record_op((u, delta, A, B, C, Dskip), y, bwd)


# ---------------------------------------------------------------------------
# Parameterized selective scan
# ---------------------------------------------------------------------------

class SsmParams(T.Module):
    """Projections and state matrices for one scan direction over D channels."""

    def __init__(self, rng: np.random.Generator, d: int, s: int = 8):
        self.d = d
        self.s = s
        # State decay rates spread over scales 1..s, shared across channels.
        self.A_log = T.Parameter(np.tile(np.log(np.arange(1, s + 1, dtype=np.float64)), (d, 1)))
        self.W_dt = T.uniform_param(rng, (d, d), d)
        # softplus(b_dt) ~ 0.05: moderate default step size.
        self.b_dt = T.Parameter(np.full(d, np.log(np.expm1(0.05))))
        self.W_B = T.uniform_param(rng, (d, s), d)
        self.W_C = T.uniform_param(rng, (d, s), d)
        self.D_skip = T.Parameter(np.ones(d))


def _linear(x: T.Tensor, W: T.Tensor, b: T.Tensor | None = None) -> T.Tensor:
    """x [..., Din] @ W [Din, Dout] (+ b) via flattening to 2-D."""
    lead = x.shape[:-1]
    out = T.matmul(T.reshape(x, (x.size // x.shape[-1], x.shape[-1])), W)
    out = T.reshape(out, lead + (W.shape[1],))
    if b is not None:
        out = T.add_bcast(out, b)
    return out


def selective_scan(x: T.Tensor, p: SsmParams) -> T.Tensor:
    """Input-dependent scan of a token sequence [L, D] or [Bn, L, D]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[2] != p.d:
        raise DimensionError(f"selective_scan: expected [*, L, {p.d}], got {x.shape}")
    delta = T.softplus(_linear(x, p.W_dt, p.b_dt))
    Bmat = _linear(x, p.W_B)
    Cmat = _linear(x, p.W_C)
    A = T.scale(T.exp(p.A_log), -1.0)
    y = scan_core(x, delta, A, Bmat, Cmat, p.D_skip)
    return T.reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# Token/map reshaping and patch embedding
# ---------------------------------------------------------------------------

def map_to_tokens(x: T.Tensor) -> tuple:
    """[D,h,w] or [Bn,D,h,w] feature map -> ([.., h*w, D], (h, w)), row-major."""
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    Bn, D, h, w = x.shape
    tokens = T.transpose(T.reshape(x, (Bn, D, h * w)), (0, 2, 1))
    return (T.reshape(tokens, (h * w, D)) if squeeze else tokens), (h, w)


def tokens_to_map(X: T.Tensor, grid: tuple) -> T.Tensor:
    """Inverse of map_to_tokens for [M,D] or [Bn,M,D] sequences."""
    h, w = grid
    squeeze = X.ndim == 2
    if squeeze:
        X = T.reshape(X, (1,) + X.shape)
    Bn, M, D = X.shape
    if M != h * w:
        raise DimensionError(f"tokens_to_map: {M} tokens cannot fill a {h}x{w} grid")
    out = T.reshape(T.transpose(X, (0, 2, 1)), (Bn, D, h, w))
    return T.reshape(out, (D, h, w)) if squeeze else out


class PatchEmbed(T.Module):
    """Non-overlapping NxN patches, linear projection, additive position term."""

    def __init__(self, rng: np.random.Generator, n: int, c_in: int, d: int, grid: tuple):
        self.n = n
        self.c_in = c_in
        self.d = d
        self.grid = grid
        self.W_proj = T.uniform_param(rng, (n * n * c_in, d), n * n * c_in)
        self.E_pos = T.zeros_param((grid[0] * grid[1], d))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return patch_embed(x, self.n, self.W_proj, self.E_pos)


def patch_embed(x: T.Tensor, n: int, W_proj: T.Tensor, E_pos: T.Tensor) -> T.Tensor:
    """[C,H,W] or [Bn,C,H,W] -> [.., M, D] tokens; patches enumerated row-major.

    Each patch is flattened in [C, n, n] row-major order before projection.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    Bn, C, H, W = x.shape
    if H % n or W % n:
        raise DimensionError(f"patch_embed: {H}x{W} not divisible by patch size {n}")
    h, w = H // n, W // n
    if E_pos.shape != (h * w, W_proj.shape[1]):
        raise DimensionError(f"patch_embed: E_pos shape {E_pos.shape} does not match "
                             f"grid {h}x{w} and width {W_proj.shape[1]}")
    t = T.reshape(x, (Bn, C, h, n, w, n))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))          # [Bn,h,w,C,n,n]
    t = T.reshape(t, (Bn, h * w, C * n * n))
    tokens = T.add_bcast(_linear(t, W_proj), E_pos)
    return T.reshape(tokens, tokens.shape[1:]) if squeeze else tokens


# ---------------------------------------------------------------------------
# Residual Vim block
# ---------------------------------------------------------------------------

class VimBlockWeights(T.Module):
    """All learned state of one residual Vim block over D-dim tokens."""

    def __init__(self, rng: np.random.Generator, d: int, s: int = 8, expand: int = 2):
        e = expand * d
        self.d = d
        self.e = e
        self.norm_g = T.Parameter(np.ones(d))
        self.norm_b = T.zeros_param((d,))
        self.W_in = T.uniform_param(rng, (d, e), d)
        self.b_in = T.zeros_param((e,))
        self.W_gate = T.uniform_param(rng, (d, e), d)
        self.b_gate = T.zeros_param((e,))
        self.conv_w = T.uniform_param(rng, (3, e), 3)
        self.conv_b = T.zeros_param((e,))
        self.fwd = SsmParams(rng, e, s)
        self.bwd = SsmParams(rng, e, s)
        self.W_out = T.uniform_param(rng, (e, d), e)
        self.b_out = T.zeros_param((d,))


def vim_block(X: T.Tensor, w: VimBlockWeights) -> T.Tensor:
    """Residual bidirectional mixer; output shape equals input shape."""
    if X.shape[-1] != w.d:
        raise DimensionError(f"vim_block: token width {X.shape[-1]} != weights width {w.d}")
    Xn = T.token_norm(X, w.norm_g, w.norm_b)
    u = _linear(Xn, w.W_in, w.b_in)
    z = _linear(Xn, w.W_gate, w.b_gate)
    u = T.silu(T.depthwise_conv1d(u, w.conv_w, w.conv_b))
    pre_gate = vim_scan_pair(u, w.fwd, w.bwd)
    y = T.mul(pre_gate, T.silu(z))
    return _linear(y, w.W_out, w.b_out) + X


def vim_scan_pair(u: T.Tensor, p_fwd: SsmParams, p_bwd: SsmParams) -> T.Tensor:
    """Sum of the forward scan and the flip-scan-flip backward scan."""
    seq_axis = u.ndim - 2
    yf = selective_scan(u, p_fwd)
    yb = T.flip(selective_scan(T.flip(u, axis=seq_axis), p_bwd), axis=seq_axis)
    return yf + yb


# ---------------------------------------------------------------------------
# Complexity probe (CLI `bench`)
# ---------------------------------------------------------------------------

def attention_mixer_np(x: np.ndarray, Wq, Wk, Wv) -> np.ndarray:
    """Single-head softmax attention; the quadratic reference mixer."""
    q = x @ Wq
    k = x @ Wk
    v = x @ Wv
    a = (q @ k.T) / np.sqrt(x.shape[1])
    a -= a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return (e / e.sum(axis=1, keepdims=True)) @ v


def scan_complexity_probe(lengths, d: int = 64, s: int = 8, reps: int = 5,
                          seed: int = 0, include_attention: bool = True) -> list:
    """Time the scan (and optionally attention) at each L.

    Returns rows (L, mixer, mean_ms, std_ms), scan rows first, each mixer in
    ascending L order.
    """
    lengths = list(lengths)
    if len(lengths) < 4 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ConfigError(f"need >= 4 strictly ascending lengths, got {lengths}")
    rng = np.random.default_rng(seed)
    rows = []

    def timed(fn):
        fn()  # warm up
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1e3)
        return float(np.mean(samples)), float(np.std(samples))

    for L in lengths:
        u = rng.standard_normal((1, L, d))
        delta = np.log1p(np.exp(rng.standard_normal((1, L, d)) - 2.0))
        A = -np.exp(np.tile(np.log(np.arange(1, s + 1, dtype=np.float64)), (d, 1)))
        B = rng.standard_normal((1, L, s))
        C = rng.standard_normal((1, L, s))
        Dsk = np.ones(d)
        mean, std = timed(lambda: scan_forward_np(u, delta, A, B, C, Dsk))
        rows.append((L, "scan", mean, std))

    if include_attention:
        Wq = rng.standard_normal((d, d))
        Wk = rng.standard_normal((d, d))
        Wv = rng.standard_normal((d, d))
        for L in lengths:
            x = rng.standard_normal((L, d))
            mean, std = timed(lambda: attention_mixer_np(x, Wq, Wk, Wv))
            rows.append((L, "attention", mean, std))
    return rows


def loglog_slope(rows, mixer: str) -> float:
    """Least-squares slope of log(mean time) against log(L) for one mixer."""
    pts = [(L, ms) for (L, name, ms, _) in rows if name == mixer]
    if len(pts) < 2:
        raise ConfigError(f"no rows for mixer {mixer!r}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])
