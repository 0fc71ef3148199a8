"""Brute-force reference implementations.

Nothing here imports the vectorised read code: every quantity is rebuilt from
scalar loops with exactly rounded summation (``math.fsum``), so agreement with
:mod:`femix.fem_read` is evidence rather than tautology.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AbsoluteContinuityError


@dataclass
class OracleReport:
    op: str
    instance: dict
    max_abs_err: float
    max_rel_err: float
    tol: float
    passed: bool
    kind: str = "abs"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def make_report(op: str, instance: dict, got, want, tol: float, kind: str = "abs") -> OracleReport:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    abs_err = float(np.max(np.abs(got - want))) if got.size else 0.0
    scale = np.maximum(np.abs(want), 1.0)
    rel_err = float(np.max(np.abs(got - want) / scale)) if got.size else 0.0
    err = abs_err if kind == "abs" else rel_err
    return OracleReport(op, instance, abs_err, rel_err, tol, bool(err <= tol), kind)


def kl(p, q) -> float:
    """sum_i p_i log(p_i / q_i), 0 log 0 := 0."""
    terms = []
    for pi, qi in zip(np.asarray(p, dtype=float).tolist(), np.asarray(q, dtype=float).tolist()):
        if pi == 0.0:
            continue
        if qi <= 0.0:
            raise AbsoluteContinuityError(f"q = {qi} where p = {pi}")
        terms.append(pi * (math.log(pi) - math.log(qi)))
    return math.fsum(terms)


def _row_lse(w_row, v_col, beta):
    """log sum_i w_i exp(beta v_i) over w_i > 0, shifted by the max exponent."""
    idx = [i for i, wi in enumerate(w_row) if wi > 0.0]
    exps = [math.log(w_row[i]) + beta * v_col[i] for i in idx]
    m = max(exps)
    return m + math.log(math.fsum(math.exp(e - m) for e in exps))


@dataclass
class BruteReadout:
    o: np.ndarray
    mu: np.ndarray
    f_max: np.ndarray
    f_tilde: np.ndarray


def brute_force_read(p, v, gates) -> BruteReadout:
    """mu, F_max, F_tilde and o for one (T, T) prior and (T, d) values by direct summation."""
    w = np.asarray(getattr(p, "weights", p), dtype=float).tolist()
    vals = np.asarray(v, dtype=float)
    T, d = vals.shape
    cols = [vals[:, c].tolist() for c in range(d)]
    lam = np.asarray(gates.lam, dtype=float)
    g = np.asarray(gates.g, dtype=float)
    beta = np.asarray(gates.beta_max, dtype=float).tolist()
    mu = np.zeros((T, d))
    f_max = np.zeros((T, d))
    f_tilde = np.zeros((T, d))
    o = np.zeros((T, d))
    for t in range(T):
        row = w[t]
        for c in range(d):
            col = cols[c]
            m = math.fsum(row[i] * col[i] for i in range(len(row)))
            f = _row_lse(row, col, beta[c]) / beta[c]
            lt = float(lam[t, c])
            ft = (1.0 - lt) * m + lt * f
            mu[t, c] = m
            f_max[t, c] = f
            f_tilde[t, c] = ft
            o[t, c] = float(g[t, c]) * ft
    return BruteReadout(o=o, mu=mu, f_max=f_max, f_tilde=f_tilde)


def brute_free_energy(w_row, v_col, beta: float) -> float:
    w_row = list(map(float, w_row))
    v_col = list(map(float, v_col))
    if beta == 0.0:
        return math.fsum(a * b for a, b in zip(w_row, v_col))
    return _row_lse(w_row, v_col, beta) / beta


def brute_posterior(w_row, v_col, beta: float) -> list[float]:
    w_row = list(map(float, w_row))
    lz = _row_lse(w_row, list(map(float, v_col)), beta)
    return [math.exp(math.log(wi) + beta * vi - lz) if wi > 0 else 0.0 for wi, vi in zip(w_row, v_col)]


def finite_diff(fn, point, h: float = 1e-5, richardson: bool = False) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point`` (scalar or array).

    With ``richardson`` the h and h/2 estimates are combined to cancel the O(h^2) term.
    """
    x0 = np.array(point, dtype=np.float64)
    scalar = x0.ndim == 0
    x = x0.reshape(-1)
    grad = np.empty_like(x)

    def central(i, step):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        fp = fn(xp.reshape(x0.shape) if not scalar else xp[0])
        fm = fn(xm.reshape(x0.shape) if not scalar else xm[0])
        return (fp - fm) / (2 * step)

    for i in range(x.size):
        d1 = central(i, h)
        if richardson:
            d2 = central(i, h / 2)
            d1 = (4 * d2 - d1) / 3
        grad[i] = d1
    return grad[0] if scalar else grad.reshape(x0.shape)


def finite_diff_hessian(fn, point, h: float = 1e-4) -> np.ndarray:
    """Second-order central differences for the full Hessian of a scalar function."""
    x = np.array(point, dtype=np.float64)
    n = x.size
    H = np.empty((n, n))
    f0 = fn(x)
    for i in range(n):
        for j in range(i, n):
            if i == j:
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                H[i, i] = (fn(xp) - 2 * f0 + fn(xm)) / h**2
            else:
                vals = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    xx = x.copy()
                    xx[i] += si * h
                    xx[j] += sj * h
                    vals.append(si * sj * fn(xx))
                H[i, j] = H[j, i] = sum(vals) / (4 * h * h)
    return H
