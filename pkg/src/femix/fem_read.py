"""Free-energy reads over a selection prior.

All array functions take prior weights ``w`` of shape ``(..., Tq, Tk)`` (or a
:class:`~femix.priors.PriorMatrix`) and values ``v`` of shape ``(..., Tk, d)``;
per-channel inverse temperatures broadcast over the last axis.  The free
energy of channel c at row t is

    F[t, c] = log(sum_i w[t, i] exp(beta_c v[i, c])) / beta_c,

with F := mu (the prior mean) at beta = 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import mpmath
import numpy as np

from .errors import AbsoluteContinuityError, ConstantValues
from .priors import PriorMatrix

POSTERIOR_CACHE_LIMIT = 2**24
BISECT_TOL = 1e-10
BISECT_MAX_ITER = 200
_CHUNK_ELEMS = 2**22


def _w(p) -> np.ndarray:
    if isinstance(p, PriorMatrix):
        return p.weights
    return np.asarray(p)


def _beta(beta, d) -> np.ndarray:
    b = np.asarray(beta)
    if b.dtype.kind != "f":
        b = b.astype(np.float64)
    if b.ndim == 0:
        b = np.full(d, float(b))
    if np.any(b < 0):
        raise ValueError("inverse temperatures must be nonnegative")
    return b


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _row_chunks(n_rows: int, per_row: int):
    step = max(1, _CHUNK_ELEMS // max(per_row, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


def log_partition(p, v, beta) -> np.ndarray:
    """log sum_i w[t, i] exp(beta_c v[i, c]), stabilised per row by the max over the support."""
    w = _w(p)
    v = np.asarray(v)
    b = _beta(beta, v.shape[-1])
    logw = _log_weights(w)
    bv = v * b
    Tq, Tk, d = w.shape[-2], w.shape[-1], v.shape[-1]
    out = np.empty(np.broadcast_shapes(w.shape[:-2], v.shape[:-2]) + (Tq, d), dtype=np.result_type(w, v))
    for rows in _row_chunks(Tq, Tk * d):
        a = logw[..., rows, :, None] + bv[..., None, :, :]
        m = a.max(axis=-2)
        out[..., rows, :] = m + np.log(np.exp(a - m[..., None, :]).sum(axis=-2))
    return out


def mean_read(p, v) -> np.ndarray:
    return _w(p) @ np.asarray(v)


def free_energy(p, v, beta) -> np.ndarray:
    v = np.asarray(v)
    b = _beta(beta, v.shape[-1])
    mu = mean_read(p, v)
    safe = np.where(b > 0, b, 1.0)
    F = log_partition(p, v, safe) / safe
    return np.where(b > 0, F, mu)


def posterior(p, v, beta) -> np.ndarray:
    """Tilted posterior q[..., t, i, c] proportional to w[t, i] exp(beta_c v[i, c]); zero off support."""
    w = _w(p)
    v = np.asarray(v)
    b = _beta(beta, v.shape[-1])
    lz = log_partition(w, v, b)
    a = _log_weights(w)[..., :, :, None] + (v * b)[..., None, :, :] - lz[..., :, None, :]
    return np.exp(a)


def grad_free_energy_v(p, v, beta) -> np.ndarray:
    """Gradient of F[t, c] with respect to v[:, c]; it is the tilted posterior."""
    return posterior(p, v, beta)


def hessian_free_energy_v(p, v, beta, t: int, c: int) -> np.ndarray:
    """beta (Diag(q) - q q^T) restricted to the support of row ``t`` (square, |M_t| wide)."""
    w = _w(p)[t]
    support = np.flatnonzero(w > 0)
    b = float(_beta(beta, np.asarray(v).shape[-1])[c])
    q = _row_posterior(w[support], np.asarray(v)[support, c], b)
    return b * (np.diag(q) - np.outer(q, q))


def kl_divergence(p, q, axis=-1) -> np.ndarray:
    """sum p log(p / q) with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)):
        raise AbsoluteContinuityError("q vanishes where p has mass")
    pos = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(np.where(pos, q, 1.0))), 0.0)
    return terms.sum(axis=axis)


# ----------------------------------------------------------------------------
# gated reads


@dataclass(frozen=True)
class FemGates:
    lam: np.ndarray
    g: np.ndarray
    beta_max: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam)
        g = np.asarray(self.g)
        b = np.asarray(self.beta_max)
        if np.any(lam < 0) or np.any(lam > 1):
            raise ValueError("lambda must lie in [0, 1]")
        if np.any(g <= 0):
            raise ValueError("outer gate must be positive")
        if np.any(b <= 0):
            raise ValueError("beta_max must be positive")


@dataclass
class FemReadout:
    o: np.ndarray
    mu: np.ndarray
    f_max: np.ndarray
    f_tilde: np.ndarray
    posterior_cache: np.ndarray | None = None


class FemGrads(NamedTuple):
    dv: np.ndarray
    dlambda: np.ndarray
    dg: np.ndarray
    dbeta_max: np.ndarray
    dp: np.ndarray


def _augmented_mix(w, v, b):
    """mu and F_max from one product of w with [v, exp(beta v - shift)].

    Rows whose exponential column underflows are recomputed with a per-row shift.
    """
    d = v.shape[-1]
    bv = v * b
    shift = bv.max(axis=-2, keepdims=True)
    aug = np.concatenate([v, np.exp(bv - shift)], axis=-1)
    mixed = w @ aug
    mu = mixed[..., :d]
    s = mixed[..., d:]
    floor = np.finfo(mixed.dtype).tiny * 1e10
    with np.errstate(divide="ignore"):
        lz = shift + np.log(s)
    bad = s < floor
    if np.any(bad):
        lz = np.where(bad, log_partition(w, v, b), lz)
    return mu, lz / b


def ltl_read(p, v, beta_max, lam):
    """Linearised-temperature read ``(1 - lam) mu + lam F_max``; returns ``(f_tilde, mu, f_max)``."""
    w = _w(p)
    v = np.asarray(v)
    b = _beta(beta_max, v.shape[-1])
    if np.any(b <= 0):
        raise ValueError("beta_max must be positive")
    mu, f_max = _augmented_mix(w, v, b)
    f_tilde = (1.0 - lam) * mu + lam * f_max
    return f_tilde, mu, f_max


def two_gate_read(p, v, gates: FemGates, cache_posterior: bool = True) -> FemReadout:
    """o = g * ((1 - lam) mu + lam F_max)."""
    w = _w(p)
    v = np.asarray(v)
    f_tilde, mu, f_max = ltl_read(w, v, gates.beta_max, gates.lam)
    o = gates.g * f_tilde
    cache = None
    n = int(np.prod(np.broadcast_shapes(w.shape[:-1], v.shape[:-2] + (1,)))) * w.shape[-1] * v.shape[-1]
    if cache_posterior and n <= POSTERIOR_CACHE_LIMIT:
        cache = _posterior_from_f(w, v, gates.beta_max, f_max)
    return FemReadout(o=o, mu=mu, f_max=f_max, f_tilde=f_tilde, posterior_cache=cache)


def _posterior_from_f(w, v, b, f):
    a = _log_weights(w)[..., :, :, None] + ((v * b)[..., None, :, :] - (f * b)[..., :, None, :])
    return np.exp(a)


def backward_two_gate(readout: FemReadout, upstream, p, v, gates: FemGates) -> FemGrads:
    """Vector-Jacobian product of :func:`two_gate_read`.

    ``dp`` is the gradient with respect to the prior weights on their support
    (zero where w == 0).  ``dbeta_max`` uses dF/dbeta = KL(q || p) / beta^2,
    evaluated as (E_q[v] - F) / beta.
    """
    w = _w(p)
    v = np.asarray(v)
    up = np.asarray(upstream)
    b = np.asarray(gates.beta_max, dtype=v.dtype)
    lam, g = gates.lam, gates.g
    d_ft = up * g
    dg = up * readout.f_tilde
    dlam = d_ft * (readout.f_max - readout.mu)
    d_mu = d_ft * (1.0 - lam)
    d_fm = d_ft * lam

    wt = np.swapaxes(w, -1, -2)
    dv = wt @ d_mu
    dp = d_mu @ np.swapaxes(v, -1, -2)
    eq_v = np.empty_like(readout.f_max)
    q_cache = readout.posterior_cache
    Tq, Tk, d = w.shape[-2], w.shape[-1], v.shape[-1]
    dv_lse = np.zeros(np.broadcast_shapes(w.shape[:-2], v.shape[:-2]) + (Tk, d), dtype=dv.dtype)
    for rows in _row_chunks(Tq, Tk * d):
        if q_cache is not None:
            q = q_cache[..., rows, :, :]
        else:
            q = _posterior_from_f(w[..., rows, :], v, b, readout.f_max[..., rows, :])
        dfm = d_fm[..., rows, :]
        dv_lse += (q * dfm[..., :, None, :]).sum(axis=-3)
        eq_v[..., rows, :] = (q * v[..., None, :, :]).sum(axis=-2)
        # dF/dw_i = exp(beta v_i) / (beta sum_r w_r exp(beta v_r)) = q_i / (beta w_i)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(w[..., rows, :, None] > 0, q / w[..., rows, :, None], 0.0)
        dp[..., rows, :] += (ratio * (dfm / b)[..., :, None, :]).sum(axis=-1)
    dv = dv + dv_lse
    dp = np.where(w > 0, dp, 0.0)
    dbeta = _sum_to_shape(d_fm * (eq_v - readout.f_max) / b, np.shape(gates.beta_max))
    return FemGrads(dv=dv, dlambda=dlam, dg=dg, dbeta_max=dbeta, dp=dp)


def _sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast result back onto ``shape`` (summing broadcast axes)."""
    if len(shape) == 0:
        return np.asarray(x.sum())
    lead = x.ndim - len(shape)
    x = x.sum(axis=tuple(range(lead))) if lead > 0 else x
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    return x.sum(axis=axes, keepdims=True) if axes else x


# ----------------------------------------------------------------------------
# scalar solvers on a single (t, c) slice


def _row_posterior(w: np.ndarray, x: np.ndarray, beta: float) -> np.ndarray:
    a = np.log(w) + beta * x
    a -= a.max()
    e = np.exp(a)
    return e / e.sum()


def _row_free_energy(w: np.ndarray, x: np.ndarray, beta: float) -> float:
    """F(beta) on the support; expm1/log1p near beta = 0 keeps the continuous extension accurate."""
    if beta == 0.0:
        return float(w @ x)
    bx = beta * x
    if np.max(np.abs(bx)) < 0.5:
        return float(np.log1p(w @ np.expm1(bx)) / beta)
    a = np.log(w) + bx
    m = a.max()
    return float((m + np.log(np.exp(a - m).sum())) / beta)


def _support_slice(p, v, t: int, c: int):
    w = _w(p)[t]
    support = np.flatnonzero(w > 0)
    return w[support], np.asarray(v, dtype=np.float64)[support, c]


def _bisect_increasing(fn, target: float, lo: float, hi: float, tol: float) -> float:
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        val = fn(mid)
        if abs(val - target) <= tol:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= np.spacing(hi):
            break
    return 0.5 * (lo + hi)


def hidden_temperature(p, v, beta_max_c: float, lambda_tc: float, t: int, c: int) -> float:
    """Temperature beta* in [0, beta_max] with F(beta*) equal to the LTL read at ``lambda_tc``."""
    w, x = _support_slice(p, v, t, c)
    if x.max() - x.min() < 1e-12:
        raise ConstantValues(f"values of channel {c} are constant on the support of row {t}")
    if lambda_tc <= 0.0:
        return 0.0
    if lambda_tc >= 1.0:
        return float(beta_max_c)
    mu = float(w @ x)
    target = (1.0 - lambda_tc) * mu + lambda_tc * _row_free_energy(w, x, beta_max_c)
    return _bisect_increasing(lambda b: _row_free_energy(w, x, b), target, 0.0, float(beta_max_c), 1e-13)


class DualSolution(NamedTuple):
    beta: float
    q: np.ndarray
    saturated: bool


def _kl_tilted(w, x, beta):
    q = _row_posterior(w, x, beta)
    return float(kl_divergence(q, w)), q


def budget_dual_solve(p, v, B: float, beta_cap: float) -> DualSolution:
    """Solve max E_q[v] s.t. KL(q || p) <= B through its exponential-tilt dual.

    KL(q_beta || p) increases with beta, so beta* is found by bisection on
    [0, beta_cap].  Budgets beyond KL(q_cap || p) saturate at ``beta_cap``.
    """
    w = np.asarray(p, dtype=np.float64)
    x = np.asarray(v, dtype=np.float64)
    if B < 0:
        raise ValueError("budget must be nonnegative")
    support = w > 0
    ws, xs = w[support], x[support]
    if B == 0:
        return DualSolution(0.0, w.copy(), False)
    if xs.max() - xs.min() < 1e-12:
        raise ConstantValues("KL is identically zero for constant values; only B = 0 is feasible")

    def embed(qs):
        q = np.zeros_like(w)
        q[support] = qs
        return q

    kl_cap, q_cap = _kl_tilted(ws, xs, beta_cap)
    if kl_cap <= B:
        return DualSolution(float(beta_cap), embed(q_cap), True)
    beta = _bisect_increasing(lambda b: _kl_tilted(ws, xs, b)[0], B, 0.0, float(beta_cap), 1e-13)
    return DualSolution(beta, embed(_row_posterior(ws, xs, beta)), False)


# ----------------------------------------------------------------------------
# fixtures for the convexity limitation and the kernel truncation table


def min_truncation_degree(R: float, eps: float) -> int:
    """Smallest N with sum_{n > N} R^n / n! <= eps, tail evaluated at 60 digits."""
    if R <= 0 or not 0 < eps < 1:
        raise ValueError("need R > 0 and 0 < eps < 1")
    with mpmath.workdps(60):
        R_ = mpmath.mpf(R)
        total = mpmath.exp(R_)
        partial = mpmath.mpf(0)
        term = mpmath.mpf(1)
        n = 0
        while True:
            partial += term
            if total - partial <= eps:
                return n
            n += 1
            term = term * R_ / n


def hull_membership_2pt(v1, v2, target, tol: float = 1e-10) -> bool:
    """True iff target = a v1 + (1 - a) v2 for a single a in [0, 1]."""
    v1, v2, target = (np.asarray(a, dtype=np.float64) for a in (v1, v2, target))
    diff = v1 - v2
    moving = np.abs(diff) > tol
    if np.any(np.abs(target[~moving] - v2[~moving]) > tol):
        return False
    if not np.any(moving):
        return True
    alphas = (target[moving] - v2[moving]) / diff[moving]
    a = float(np.median(alphas))
    if a < -tol or a > 1 + tol:
        return False
    return bool(np.all(np.abs(a * v1 + (1 - a) * v2 - target) <= tol))
