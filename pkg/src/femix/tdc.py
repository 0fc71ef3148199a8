"""Time-decay conditioner: a low-rank causal convolution with an input-conditioned
exponential kernel, and the FiLM-style coupling of its output to the prior and gates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .fem_read import FemGates


# tanh rounds to exactly -1 for large negative inputs; keep the outer gate factor strictly positive
GATE_FACTOR_FLOOR = 1e-12


def default_hidden_width(d: int) -> int:
    return max(1, d // 16)


@dataclass
class TdcParams:
    W_f: np.ndarray
    W_x: np.ndarray
    W_s: np.ndarray
    W_c: np.ndarray

    def __post_init__(self):
        D, Hc = self.W_f.shape
        if Hc < 1:
            raise ValueError("hidden width must be >= 1")
        for name in ("W_x", "W_s"):
            if getattr(self, name).shape != (D, Hc):
                raise ValueError(f"{name} must be {D}x{Hc}")
        if self.W_c.shape[0] != Hc:
            raise ValueError("W_c must have H_c rows")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[1]

    @classmethod
    def init(cls, D: int, Hc: int, Dc: int, rng: np.random.Generator, std: float = 0.02) -> "TdcParams":
        return cls(*(rng.normal(0.0, std, size=s) for s in ((D, Hc), (D, Hc), (D, Hc), (Hc, Dc))))


@dataclass
class TdcTrace:
    x_hat: np.ndarray
    ln_inv: np.ndarray
    z_f: np.ndarray
    s: np.ndarray
    log_f: np.ndarray
    u: np.ndarray
    z_s: np.ndarray
    a: np.ndarray
    a_unit: np.ndarray
    a_norm: np.ndarray
    h_tilde: np.ndarray
    h_ln: np.ndarray
    h_ln_inv: np.ndarray
    h: np.ndarray
    c: np.ndarray

    @property
    def f(self) -> np.ndarray:
        return np.exp(self.log_f)


def decay_scan(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h~_t = exp(-s_t) * h~_{t-1} + u_t.

    Equal to f_t * sum_{i<=t} u_i / f_i with f_t = exp(-cumsum(s)), without
    ever forming 1 / f_i, so long sequences cannot overflow.
    """
    out = np.empty_like(u)
    decay = np.exp(-s)
    acc = np.zeros(u.shape[1:], dtype=u.dtype)
    for t in range(u.shape[0]):
        acc = decay[t] * acc + u[t]
        out[t] = acc
    return out


def rank1_kernel(log_f: np.ndarray) -> np.ndarray:
    """K[t, i, :] = f_t / f_i for i <= t (zero above the diagonal)."""
    T = log_f.shape[0]
    diff = log_f[:, None, :] - log_f[None, :, :]
    return np.where(np.tril(np.ones((T, T), dtype=bool))[:, :, None], np.exp(np.minimum(diff, 0.0)), 0.0)


def tdc_forward(x: np.ndarray, params: TdcParams) -> TdcTrace:
    x_hat, ln_inv = nn.layer_norm(x)
    z_f = x_hat @ params.W_f
    s = nn.softplus(z_f)
    u = x_hat @ params.W_x
    z_s = x_hat @ params.W_s
    a = nn.softplus(z_s)
    log_f = -np.cumsum(s, axis=0)
    h_tilde = decay_scan(s, u)
    a_unit, a_norm = nn.unit_norm(a)
    h_ln, h_ln_inv = nn.layer_norm(h_tilde)
    h = nn.silu(a_unit) * h_ln
    c = h @ params.W_c
    return TdcTrace(x_hat, ln_inv, z_f, s, log_f, u, z_s, a, a_unit, a_norm, h_tilde, h_ln, h_ln_inv, h, c)


def tdc_backward(dc: np.ndarray, params: TdcParams, tr: TdcTrace):
    """Returns (dx, grads) with grads keyed like the TdcParams fields."""
    dW_c = tr.h.T @ dc
    dh = dc @ params.W_c.T
    sil = nn.silu(tr.a_unit)
    d_hln = dh * sil
    d_aunit = dh * tr.h_ln * nn.silu_grad(tr.a_unit)
    da = nn.unit_norm_backward(d_aunit, tr.a_unit, tr.a_norm)
    dz_s = da * nn.sigmoid(tr.z_s)
    d_htilde = nn.layer_norm_backward(d_hln, tr.h_ln, tr.h_ln_inv)

    # reverse of h~_t = e^{-s_t} h~_{t-1} + u_t
    T = dc.shape[0]
    decay = np.exp(-tr.s)
    du = np.empty_like(tr.u)
    ds = np.zeros_like(tr.s)
    adj = np.zeros(tr.u.shape[1:])
    for t in range(T - 1, -1, -1):
        adj = d_htilde[t] + (decay[t + 1] * adj if t + 1 < T else 0.0)
        du[t] = adj
        if t > 0:
            ds[t] = -decay[t] * tr.h_tilde[t - 1] * adj
    dz_f = ds * nn.sigmoid(tr.z_f)

    dx_hat = dz_f @ params.W_f.T + du @ params.W_x.T + dz_s @ params.W_s.T
    grads = {
        "W_f": tr.x_hat.T @ dz_f,
        "W_x": tr.x_hat.T @ du,
        "W_s": tr.x_hat.T @ dz_s,
        "W_c": dW_c,
    }
    dx = nn.layer_norm_backward(dx_hat, tr.x_hat, tr.ln_inv)
    return dx, grads


# ----------------------------------------------------------------------------
# coupling


@dataclass
class CouplingHeads:
    """One linear map per modulation target, each reading its own quarter of c."""

    M_p: np.ndarray
    M_v: np.ndarray
    M_g: np.ndarray
    M_l: np.ndarray

    @classmethod
    def zeros(cls, slice_width: int, prior_dim: int, d: int) -> "CouplingHeads":
        return cls(
            np.zeros((slice_width, prior_dim)),
            np.zeros((slice_width, d)),
            np.zeros((slice_width, d)),
            np.zeros((slice_width, d)),
        )


def split_slices(c: np.ndarray):
    """Four disjoint, equal-width slices (prior, value, outer gate, temperature gate)."""
    w = c.shape[-1] // 4
    if w < 1:
        raise ValueError("conditioning width must be at least 4")
    return tuple(c[..., k * w : (k + 1) * w] for k in range(4))


@dataclass
class Coupled:
    theta: np.ndarray
    v: np.ndarray
    gates: FemGates
    eta_v: np.ndarray
    eta_g: np.ndarray
    eta_l: np.ndarray
    lam_raw: np.ndarray


def modulate(theta, v, gates: FemGates, delta_theta, eta_v, eta_g, eta_l) -> Coupled:
    """Apply given modulations pointwise in t; lambda is clipped back into [0, 1]."""
    lam_raw = gates.lam * (1.0 + eta_l)
    new_gates = FemGates(lam=np.clip(lam_raw, 0.0, 1.0), g=gates.g * (1.0 + eta_g), beta_max=gates.beta_max)
    return Coupled(
        theta=theta + delta_theta,
        v=v * (1.0 + eta_v),
        gates=new_gates,
        eta_v=eta_v,
        eta_g=eta_g,
        eta_l=eta_l,
        lam_raw=lam_raw,
    )


def tdc_couple(c, theta, v, gates: FemGates, heads: CouplingHeads) -> Coupled:
    """Modulate the prior parameters, values and gates from the slices of c.

    Each eta is tanh of a linear read of its slice, so 1 + eta stays in (0, 2)
    and the outer gate remains positive (the gate factor is floored at
    ``GATE_FACTOR_FLOOR`` where tanh saturates in floating point).
    """
    c_p, c_v, c_g, c_l = split_slices(c)
    return modulate(
        theta,
        v,
        gates,
        c_p @ heads.M_p,
        np.tanh(c_v @ heads.M_v),
        np.maximum(np.tanh(c_g @ heads.M_g), GATE_FACTOR_FLOOR - 1.0),
        np.tanh(c_l @ heads.M_l),
    )
