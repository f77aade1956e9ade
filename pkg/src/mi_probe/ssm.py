"""State-space sequence kernels.

Continuous dynamics ``h' = A h + B x``, ``y = C h + D x`` with diagonal ``A``;
zero-order-hold discretisation; the time-invariant recurrence; the
input-dependent ("selective") scan; and a bidirectional block built from two
selective scans. The selective scan and the block carry hand-written
backward passes so the toy encoders in :mod:`mi_probe.models` can be trained
without an autodiff framework.

Array conventions: sequences are ``(L, M)`` or batched ``(B, L, M)`` with
``M`` channels; per-channel state has ``N`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, UsageError

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# time-invariant path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContinuousSSM:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0
    log_delta: float = 0.0

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if not (self.A.shape == self.B.shape == self.C.shape) or self.A.ndim != 1:
            raise DimensionError("A, B and C must be N-vectors of equal length")
        # a == 0 is tolerated: discretize_zoh takes the analytic limit there
        if np.any(self.A > 0):
            raise UsageError("A entries must be non-positive for a stable system")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))


@dataclass(frozen=True)
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A_bar", np.atleast_1d(np.asarray(self.A_bar, dtype=np.float64)))
        object.__setattr__(self, "B_bar", np.atleast_1d(np.asarray(self.B_bar, dtype=np.float64)))
        if self.A_bar.shape != self.B_bar.shape:
            raise DimensionError("A_bar and B_bar must have the same shape")


def discretize_zoh(cssm: ContinuousSSM) -> DiscreteSSM:
    """Zero-order hold: ``A_bar = exp(dt a)``, ``B_bar = (exp(dt a) - 1) / a * b``.

    Entries with ``a == 0`` use the limit ``B_bar = dt * b``.
    """
    dt = cssm.delta
    a = cssm.A
    a_bar = np.exp(dt * a)
    zero = a == 0.0
    safe_a = np.where(zero, 1.0, a)
    b_bar = np.where(zero, dt * cssm.B, np.expm1(dt * a) / safe_a * cssm.B)
    return DiscreteSSM(a_bar, b_bar)


def ssm_step(h: np.ndarray, x_t: float, d: DiscreteSSM, C: np.ndarray, D: float):
    """One recurrence step; returns ``(h_next, y_t)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != d.A_bar.shape or np.shape(C) != d.A_bar.shape:
        raise DimensionError(f"state {h.shape} / C {np.shape(C)} do not match N={d.A_bar.shape[0]}")
    h_next = d.A_bar * h + d.B_bar * x_t
    return h_next, float(np.dot(C, h_next) + D * x_t)


def ssm_scan(d: DiscreteSSM, C: np.ndarray, D: float, sequence, return_states: bool = False):
    """Run the recurrence over a scalar sequence from ``h_0 = 0``."""
    u = np.asarray(sequence, dtype=np.float64).ravel()
    if u.size < 1:
        raise UsageError("ssm_scan needs at least one input")
    C = np.asarray(C, dtype=np.float64)
    if C.shape != d.A_bar.shape:
        raise DimensionError(f"C has shape {C.shape}, expected {d.A_bar.shape}")
    states = np.empty((u.size, d.A_bar.size))
    h = np.zeros(d.A_bar.size)
    a_bar, b_bar = d.A_bar, d.B_bar
    for t in range(u.size):
        h = a_bar * h + b_bar * u[t]
        states[t] = h
    y = states @ C + D * u
    return (y, states) if return_states else y


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectiveProjections:
    """Affine maps from a frame to its step size, input vector and readout vector.

    ``delta_t = softplus(W_delta x + b_delta)`` (one per channel),
    ``B_t = W_B x + b_B`` and ``C_t = W_C x + b_C`` (N-vectors shared by the channels).
    """

    W_delta: np.ndarray
    b_delta: np.ndarray
    W_B: np.ndarray
    b_B: np.ndarray
    W_C: np.ndarray
    b_C: np.ndarray

    @property
    def width(self) -> int:
        return self.W_delta.shape[1]

    @property
    def state_dim(self) -> int:
        return self.W_B.shape[0]


@dataclass(frozen=True)
class SelectiveSSM:
    """One scan direction: projections, diagonal ``A = -exp(a_log)`` and skip ``D``."""

    proj: SelectiveProjections
    a_log: np.ndarray
    D: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ W.T + b`` over the last axis, done as one 2-D matmul."""
    out = x.reshape(-1, x.shape[-1]) @ W.T
    out += b
    return out.reshape(x.shape[:-1] + (W.shape[0],))


def _matmul(x, W):
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))


def softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def selective_params(x_t, proj: SelectiveProjections):
    """``(delta_t, B_t, C_t)`` for a frame (or any array of frames on the last axis)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != proj.width:
        raise DimensionError(f"frame width {x_t.shape[-1]} != projection width {proj.width}")
    delta = softplus(x_t @ proj.W_delta.T + proj.b_delta)
    b_t = x_t @ proj.W_B.T + proj.b_B
    c_t = x_t @ proj.W_C.T + proj.b_C
    return delta, b_t, c_t


def _as_batch(sequence):
    u = np.asarray(sequence, dtype=np.float64)
    if u.ndim == 2:
        return u[None], True
    if u.ndim == 3:
        return u, False
    raise DimensionError(f"expected (L, M) or (B, L, M) input, got {u.shape}")


def selective_scan_cached(ssm: SelectiveSSM, u: np.ndarray):
    """Batched selective scan on ``(B, L, M)``; returns ``(y, cache)``."""
    proj = ssm.proj
    if u.shape[-1] != proj.width:
        raise DimensionError(f"sequence width {u.shape[-1]} != projection width {proj.width}")
    length = u.shape[1]
    if length < 1:
        raise UsageError("selective_scan needs at least one frame")
    A = ssm.A
    # time-major copies keep every per-step slice contiguous
    ut = np.ascontiguousarray(u.transpose(1, 0, 2))                  # (L, B, M)
    dt_pre = affine(ut, proj.W_delta, proj.b_delta)
    dt = softplus(dt_pre)
    b_t = affine(ut, proj.W_B, proj.b_B)                                  # (L, B, N)
    c_t = affine(ut, proj.W_C, proj.b_C)
    decay = np.exp(dt[..., None] * A)                                 # (L, B, M, N)
    states = (dt * ut)[..., None] * b_t[:, :, None, :]                # drive, overwritten by states
    for t in range(1, length):
        prev = decay[t] * states[t - 1]
        states[t] += prev
    if not np.all(np.isfinite(states)):
        bad = int(np.argmax(~np.all(np.isfinite(states), axis=(1, 2, 3))))
        raise NumericError(f"selective scan state became non-finite at step {bad}", step=bad)
    y = np.einsum("lbmn,lbn->lbm", states, c_t) + ssm.D * ut
    cache = (ut, dt_pre, dt, b_t, c_t, decay, states)
    return y.transpose(1, 0, 2), cache


def selective_scan_backward(ssm: SelectiveSSM, cache, grad_y: np.ndarray):
    """Gradients of ``sum(grad_y * y)``; returns ``(grad_u, grads)`` with ``grads`` a dict."""
    ut, dt_pre, dt, b_t, c_t, decay, states = cache
    A = ssm.A
    proj = ssm.proj
    length = ut.shape[0]
    gy = np.ascontiguousarray(grad_y.transpose(1, 0, 2))              # (L, B, M)

    g_D = np.einsum("lbm,lbm->m", gy, ut)
    g_u = gy * ssm.D
    g_c = np.einsum("lbm,lbmn->lbn", gy, states)
    # adjoint of the states, accumulated in place from the direct readout term
    g_states = gy[..., None] * c_t[:, :, None, :]
    for t in range(length - 2, -1, -1):
        nxt = decay[t + 1] * g_states[t + 1]
        g_states[t] += nxt
    g_decay = g_states[1:] * states[:-1]
    g_decay *= decay[1:]                                               # d exp(arg) / d arg
    g_drive_b = np.einsum("lbmn,lbn->lbm", g_states, b_t)
    g_dt = g_drive_b * ut
    g_dt[1:] += np.einsum("lbmn,mn->lbm", g_decay, A)
    g_u += g_drive_b * dt
    g_b = np.einsum("lbmn,lbm->lbn", g_states, dt * ut)
    g_a_log = np.einsum("lbmn,lbm->mn", g_decay, dt[1:]) * A

    g_dt_pre = g_dt * _sigmoid(dt_pre)
    m = ut.shape[-1]
    flat_u = ut.reshape(-1, m)
    grads = {
        "proj.W_delta": g_dt_pre.reshape(-1, m).T @ flat_u,
        "proj.b_delta": g_dt_pre.sum(axis=(0, 1)),
        "proj.W_B": g_b.reshape(-1, g_b.shape[-1]).T @ flat_u,
        "proj.b_B": g_b.sum(axis=(0, 1)),
        "proj.W_C": g_c.reshape(-1, g_c.shape[-1]).T @ flat_u,
        "proj.b_C": g_c.sum(axis=(0, 1)),
        "a_log": g_a_log,
        "D": g_D,
    }
    g_u += _matmul(g_dt_pre, proj.W_delta) + _matmul(g_b, proj.W_B) + _matmul(g_c, proj.W_C)
    return g_u.transpose(1, 0, 2), grads


def selective_scan(proj: SelectiveProjections, A: np.ndarray, D: np.ndarray, sequence) -> np.ndarray:
    """Input-dependent scan over ``(L, M)`` (or ``(B, L, M)``) frames.

    Each step discretises with its own ``delta_t``: the state decays by
    ``exp(delta_t * a)`` and is driven by ``delta_t * B_t * x_t``; the output
    is ``<C_t, h_t> + D * x_t`` per channel.
    """
    A = np.asarray(A, dtype=np.float64)
    if np.any(A >= 0):
        raise UsageError("selective_scan requires strictly negative A")
    ssm = SelectiveSSM(proj, np.log(-A), np.asarray(D, dtype=np.float64))
    u, squeeze = _as_batch(sequence)
    y, _ = selective_scan_cached(ssm, u)
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# bidirectional block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiMambaBlockParams:
    """Pre-norm bidirectional selective-scan block.

    ``out = W_out (scan_f(u) + rev(scan_b(rev(u)))) + b_out (+ x)`` where
    ``u = silu(W_in layernorm(x) + b_in)``.
    """

    norm_gain: np.ndarray
    norm_bias: np.ndarray
    W_in: np.ndarray
    b_in: np.ndarray
    forward: SelectiveSSM
    backward: SelectiveSSM
    W_out: np.ndarray
    b_out: np.ndarray
    residual: bool = True

    @property
    def width(self) -> int:
        return self.W_in.shape[0]


def init_selective_ssm(width: int, state_dim: int, rng: np.random.Generator) -> SelectiveSSM:
    scale = 1.0 / np.sqrt(width)
    proj = SelectiveProjections(
        W_delta=rng.uniform(-scale, scale, (width, width)),
        # softplus^-1 of step sizes spread over [0.05, 0.5]
        b_delta=np.log(np.expm1(np.exp(rng.uniform(np.log(0.05), np.log(0.5), width)))),
        W_B=rng.uniform(-scale, scale, (state_dim, width)),
        b_B=np.zeros(state_dim),
        W_C=rng.uniform(-scale, scale, (state_dim, width)),
        b_C=np.zeros(state_dim),
    )
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (width, 1)))
    return SelectiveSSM(proj, a_log, np.ones(width))


def init_block(width: int, state_dim: int, rng: np.random.Generator, residual: bool = True) -> BiMambaBlockParams:
    scale = 1.0 / np.sqrt(width)
    return BiMambaBlockParams(
        norm_gain=np.ones(width),
        norm_bias=np.zeros(width),
        W_in=rng.uniform(-scale, scale, (width, width)),
        b_in=np.zeros(width),
        forward=init_selective_ssm(width, state_dim, rng),
        backward=init_selective_ssm(width, state_dim, rng),
        W_out=rng.uniform(-scale, scale, (width, width)),
        b_out=np.zeros(width),
        residual=residual,
    )


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    inv = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    return centred * inv * gain + bias


def _silu(z):
    return z * _sigmoid(z)


def bimamba_block_cached(params: BiMambaBlockParams, x: np.ndarray):
    """Block forward on ``(B, L, M)``; returns ``(out, cache)``."""
    if x.shape[-1] != params.width:
        raise DimensionError(f"frame width {x.shape[-1]} != block width {params.width}")
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    inv = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centred * inv
    z = xhat * params.norm_gain + params.norm_bias
    pre = affine(z, params.W_in, params.b_in)
    sig = _sigmoid(pre)
    u = pre * sig
    y_f, cache_f = selective_scan_cached(params.forward, u)
    y_b_rev, cache_b = selective_scan_cached(params.backward, u[:, ::-1])
    s = y_f + y_b_rev[:, ::-1]
    out = affine(s, params.W_out, params.b_out)
    if params.residual:
        out = out + x
    return out, (xhat, inv, z, pre, sig, u, s, cache_f, cache_b)


def bimamba_block_backward(params: BiMambaBlockParams, cache, grad_out: np.ndarray):
    xhat, inv, z, pre, sig, u, s, cache_f, cache_b = cache
    m = params.width
    grads = {
        "W_out": grad_out.reshape(-1, m).T @ s.reshape(-1, m),
        "b_out": grad_out.sum(axis=(0, 1)),
    }
    g_s = _matmul(grad_out, params.W_out)
    g_u_f, g_fwd = selective_scan_backward(params.forward, cache_f, g_s)
    g_u_b_rev, g_bwd = selective_scan_backward(params.backward, cache_b, g_s[:, ::-1])
    g_u = g_u_f + g_u_b_rev[:, ::-1]
    grads.update({f"forward.{k}": v for k, v in g_fwd.items()})
    grads.update({f"backward.{k}": v for k, v in g_bwd.items()})

    g_pre = g_u * (sig * (1.0 + pre * (1.0 - sig)))
    grads["W_in"] = g_pre.reshape(-1, m).T @ z.reshape(-1, m)
    grads["b_in"] = g_pre.sum(axis=(0, 1))
    g_z = _matmul(g_pre, params.W_in)
    grads["norm_gain"] = np.einsum("blm,blm->m", g_z, xhat)
    grads["norm_bias"] = g_z.sum(axis=(0, 1))
    g_xhat = g_z * params.norm_gain
    g_x = inv * (g_xhat - g_xhat.mean(axis=-1, keepdims=True)
                 - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True))
    if params.residual:
        g_x = g_x + grad_out
    return g_x, grads


def bimamba_block(params: BiMambaBlockParams, sequence) -> np.ndarray:
    """Apply the block to ``(L, M)`` or ``(B, L, M)`` frames."""
    x, squeeze = _as_batch(sequence)
    out, _ = bimamba_block_cached(params, x)
    return out[0] if squeeze else out
