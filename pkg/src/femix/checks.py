"""Property and oracle suites, each returning :class:`~femix.oracle.OracleReport` rows.

A suite is a function ``(rng, n, fault) -> list[OracleReport]``.  ``fault=True``
flips the sign of analytic gradients in the suites that check them, which
must make those suites fail.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import fem_read as fr
from . import oracle
from .block import BlockConfig, block_backward, block_forward, init_params
from .fem_read import FemGates
from .oracle import OracleReport, make_report
from .priors import (
    GlaParams,
    aft_prior,
    aft_stream_read,
    decay_prior,
    decay_stream_read,
    diagonal_ssm_impulse,
    gla_prior,
    gla_stream_read,
    softmax_prior,
    ssm_prior,
    ssm_stream_read,
)
from .tdc import decay_scan, rank1_kernel

SuiteFn = Callable[[np.random.Generator, int, bool], list]
SUITES: dict[str, SuiteFn] = {}
DEFAULT_COUNTS: dict[str, int] = {}

TRUNCATION_TABLE = {5: (19, 22, 25), 10: (33, 36, 40)}
TRUNCATION_EPS = (1e-4, 1e-6, 1e-8)
FD_STEP = 1e-5  # block checks: truncation ~h^2, rounding ~1e-16 |f| / h


def suite(name: str, default_n: int = 200):
    def register(fn):
        SUITES[name] = fn
        DEFAULT_COUNTS[name] = default_n
        return fn

    return register


def select(pattern: str | None) -> list[str]:
    """Suite names containing ``pattern`` (all when empty), in registration order."""
    return [k for k in SUITES if not pattern or pattern in k]


def run_suites(pattern: str | None, seed: int, fault: bool = False, n: int | None = None) -> list[OracleReport]:
    reports = []
    for k, name in enumerate(select(pattern)):
        rng = np.random.default_rng([seed, k])
        reports.extend(SUITES[name](rng, n or DEFAULT_COUNTS[name], fault))
    return reports


def _sign(fault: bool) -> float:
    return -1.0 if fault else 1.0


# ----------------------------------------------------------------------------
# random instances


def random_prior(rng, T: int, drop: float = 0.3) -> np.ndarray:
    """Causal softmax prior with random extra zeros (the diagonal is always kept)."""
    mask = np.tril(rng.random((T, T)) > drop) | np.eye(T, dtype=bool)
    return softmax_prior(rng.normal(0.0, 1.5, (T, T)), mask).weights


def random_instance(rng, beta_range=(0.1, 5.0)):
    T = int(rng.integers(2, 7))
    d = int(rng.integers(1, 4))
    w = random_prior(rng, T)
    v = rng.normal(0.0, 1.0, (T, d))
    lo, hi = np.log(beta_range[0]), np.log(beta_range[1])
    beta = np.exp(rng.uniform(lo, hi, d))
    return w, v, beta


def _row(w, v, t, c):
    s = np.flatnonzero(w[t] > 0)
    return w[t, s], v[s, c]


class _Acc:
    """Running max of abs/rel errors over instances."""

    def __init__(self, op, tol, kind="abs", **instance):
        self.op, self.tol, self.kind, self.instance = op, tol, kind, instance
        self.abs = 0.0
        self.rel = 0.0
        self.bad = 0

    def add(self, got, want):
        r = make_report(self.op, {}, got, want, self.tol, self.kind)
        self.abs = max(self.abs, r.max_abs_err)
        self.rel = max(self.rel, r.max_rel_err)
        self.bad += not r.passed

    def flag(self, ok: bool, err: float = 0.0):
        self.abs = max(self.abs, err)
        self.rel = max(self.rel, err)
        self.bad += not ok

    def report(self) -> OracleReport:
        return OracleReport(self.op, self.instance, self.abs, self.rel, self.tol, self.bad == 0, self.kind)


# ----------------------------------------------------------------------------
# fem_read


@suite("fem_read.mean_read")
def _mean_read(rng, n, fault):
    acc = _Acc("mean_read vs fsum oracle", 1e-12, n=n)
    for _ in range(n):
        w, v, b = random_instance(rng)
        acc.add(fr.mean_read(w, v), oracle.brute_force_read(w, v, FemGates(np.zeros_like(v), np.ones_like(v), b)).mu)
    return [acc.report()]


@suite("fem_read.free_energy")
def _free_energy(rng, n, fault):
    acc = _Acc("free_energy vs scalar oracle", 1e-12, "rel", n=n)
    for _ in range(n):
        w, v, b = random_instance(rng)
        want = np.array([[oracle.brute_free_energy(*_row(w, v, t, c), b[c]) for c in range(v.shape[1])] for t in range(v.shape[0])])
        acc.add(fr.free_energy(w, v, b), want)
    # p = (0.25, 0.75), v = (1, -1), beta = 2 at 50 digits
    import mpmath

    with mpmath.workdps(50):
        exact = float(mpmath.log(mpmath.mpf("0.25") * mpmath.e**2 + mpmath.mpf("0.75") * mpmath.e ** -2) / 2)
    w2 = np.array([[1.0, 0.0], [0.25, 0.75]])
    acc.add(fr.free_energy(w2, np.array([[1.0], [-1.0]]), 2.0)[1, 0], exact)
    return [acc.report()]


@suite("fem_read.decomposition")
def _decomposition(rng, n, fault):
    acc = _Acc("F - mu - KL(p||q)/beta", 1e-10, n=n)
    for _ in range(n):
        w, v, b = random_instance(rng)
        F = fr.free_energy(w, v, b)
        mu = fr.mean_read(w, v)
        q = fr.posterior(w, v, b)
        for t in range(v.shape[0]):
            for c in range(v.shape[1]):
                acc.add(F[t, c] - mu[t, c] - oracle.kl(w[t], q[t, :, c]) / b[c], 0.0)
    return [acc.report()]


@suite("fem_read.grad_v")
def _grad_v(rng, n, fault):
    acc = _Acc("dF/dv = q vs central differences", 1e-6, "rel", n=n)
    norm = _Acc("sum_i q_i = 1", 1e-12, n=n)
    for _ in range(n):
        w, v, b = random_instance(rng)
        q = _sign(fault) * fr.grad_free_energy_v(w, v, b)
        t = int(rng.integers(v.shape[0]))
        c = int(rng.integers(v.shape[1]))

        def f(col, t=t, c=c):
            vv = v.copy()
            vv[:, c] = col
            return float(fr.free_energy(w, vv, b)[t, c])

        acc.add(q[t, :, c], oracle.finite_diff(f, v[:, c], h=1e-5))
        norm.add(np.abs(q).sum(axis=1), 1.0)
    return [acc.report(), norm.report()]


@suite("fem_read.hessian")
def _hessian(rng, n, fault):
    acc = _Acc("Hessian vs second differences", 1e-5, n=n)
    psd = _Acc("Hessian PSD and op-norm <= beta/2", 1e-12, n=n)
    for _ in range(n):
        w, v, b = random_instance(rng, (0.1, 3.0))
        t = int(rng.integers(v.shape[0]))
        c = int(rng.integers(v.shape[1]))
        ws, xs = _row(w, v, t, c)
        Hm = fr.hessian_free_energy_v(w, v, b, t, c)
        acc.add(Hm, oracle.finite_diff_hessian(lambda x: oracle.brute_free_energy(ws, x, b[c]), xs))
        ev = np.linalg.eigvalsh(Hm)
        lo, hi = float(ev.min()), float(ev.max())
        psd.flag(lo >= -1e-12 and hi <= b[c] / 2 + 1e-12, max(0.0, -lo, hi - b[c] / 2))
    return [acc.report(), psd.report()]


@suite("fem_read.dbeta")
def _dbeta(rng, n, fault):
    acc = _Acc("dF/dbeta = KL(q||p)/beta^2 vs differences", 1e-6, "rel", n=n)
    for _ in range(n):
        w, v, b = random_instance(rng, (0.3, 5.0))
        t = int(rng.integers(v.shape[0]))
        c = int(rng.integers(v.shape[1]))
        ws, xs = _row(w, v, t, c)
        q = oracle.brute_posterior(ws, xs, b[c])
        want = oracle.kl(q, ws) / b[c] ** 2
        got = oracle.finite_diff(lambda bb: float(fr.free_energy(w, v[:, c : c + 1], bb)[t, 0]), b[c], h=1e-4, richardson=True)
        acc.add(_sign(fault) * want, got)
    return [acc.report()]


@suite("fem_read.shift_scale")
def _shift_scale(rng, n, fault):
    shift = _Acc("F(v + c) = c + F(v)", 1e-12, "rel", n=n)
    scale = _Acc("F(beta; a v) = a F(a beta; v)", 1e-12, "rel", n=n)
    for _ in range(n):
        w, v, b = random_instance(rng)
        cst = rng.uniform(-3, 3, v.shape[1])
        shift.add(fr.free_energy(w, v + cst, b), cst + fr.free_energy(w, v, b))
        for a in (0.5, 2.0):
            scale.add(fr.free_energy(w, a * v, b), a * fr.free_energy(w, v, a * b))
    return [shift.report(), scale.report()]


def _margin(xs):
    top = np.sort(xs)[::-1]
    return (top[0] - top[1]) if xs.size > 1 else np.inf


@suite("fem_read.bounds")
def _bounds(rng, n, fault):
    rng_ok = _Acc("mu <= F <= max v and F >= v* + log p*/beta", 1e-12, n=n)
    conc = _Acc("1 - q* <= ((1 - p*)/p*) exp(-beta gap)", 1e-12, n=n)
    for _ in range(n):
        w, v, b = random_instance(rng, (0.1, 20.0))
        F = fr.free_energy(w, v, b)
        mu = fr.mean_read(w, v)
        q = fr.posterior(w, v, b)
        for t in range(v.shape[0]):
            for c in range(v.shape[1]):
                ws, xs = _row(w, v, t, c)
                i = int(np.argmax(xs))
                lower = xs[i] + math.log(ws[i]) / b[c]
                viol = max(mu[t, c] - F[t, c], F[t, c] - xs[i], lower - F[t, c], 0.0)
                rng_ok.flag(viol <= 1e-12, viol)
                gap = _margin(xs)
                if np.isfinite(gap) and gap > 0:
                    s = np.flatnonzero(w[t] > 0)
                    qstar = q[t, s[i], c]
                    bound = (1 - ws[i]) / ws[i] * math.exp(-b[c] * gap)
                    excess = max(0.0, (1 - qstar) - bound)
                    conc.flag(excess <= 1e-12, excess)
    return [rng_ok.report(), conc.report()]


@suite("fem_read.monotonicity")
def _monotone(rng, n, fault):
    acc = _Acc("F(beta1) <= F(beta2) for beta1 < beta2", 1e-12, n=n)
    for _ in range(n):
        w, v, _ = random_instance(rng)
        b1, b2 = np.sort(rng.uniform(0.01, 10.0, 2))
        viol = float(np.max(fr.free_energy(w, v, b1) - fr.free_energy(w, v, b2)))
        acc.flag(viol <= 1e-12, max(viol, 0.0))
    return [acc.report()]


@suite("fem_read.small_beta")
def _small_beta(rng, n, fault):
    acc = _Acc("|F - mu - beta Var/2| / beta^2 ratio test (factor 10)", 10.0, "ratio", n=n)
    worst = 0.0
    for _ in range(n):
        w, v, _ = random_instance(rng)
        t = int(rng.integers(v.shape[0]))
        c = int(rng.integers(v.shape[1]))
        ws, xs = _row(w, v, t, c)
        mu = float(ws @ xs)
        var = float(ws @ (xs - mu) ** 2)

        def rem(beta):
            return abs(fr._row_free_energy(ws, xs, beta) - mu - beta * var / 2) / beta**2

        ref = rem(1e-2)
        floor = 1e-6 * (1.0 + np.max(np.abs(xs))) ** 3
        ratio = max(rem(1e-3), rem(1e-4)) / max(ref, floor)
        worst = max(worst, ratio)
        acc.flag(ratio <= 10.0, ratio)
    acc.abs = acc.rel = worst
    return [acc.report()]


@suite("fem_read.hidden_temperature", 100)
def _hidden(rng, n, fault):
    rec = _Acc("|F(beta*(lam)) - F_tilde(lam)|", 1e-9, n=n)
    mono = _Acc("beta*(lam) nondecreasing on lam grid", 0.0, n=n)
    grid = np.round(np.linspace(0.0, 1.0, 11), 12)
    for _ in range(n):
        w, v, b = random_instance(rng)
        t = int(rng.integers(v.shape[0]))
        c = int(rng.integers(v.shape[1]))
        ws, xs = _row(w, v, t, c)
        if xs.max() - xs.min() < 1e-12:
            continue
        prev = -np.inf
        for lam in grid:
            bs = fr.hidden_temperature(w, v, b[c], lam, t, c)
            ft, _, _ = fr.ltl_read(w, v[:, c : c + 1], b[c], lam)
            rec.add(oracle.brute_free_energy(ws, xs, bs), ft[t, 0])
            mono.flag(bs >= prev, max(0.0, prev - bs))
            prev = bs
    return [rec.report(), mono.report()]


def random_budget_instance(rng):
    K = int(rng.integers(2, 9))
    p = rng.dirichlet(np.ones(K))
    v = rng.normal(0.0, 1.0, K)
    kl_max = -math.log(p[int(np.argmax(v))])
    return p, v, kl_max


@suite("fem_read.budget_dual", 100)
def _budget(rng, n, fault):
    acc = _Acc("|KL(q_beta* || p) - B|", 1e-8, n=n)
    mono = _Acc("beta*(B) nondecreasing on B grid", 0.0, n=n)
    for _ in range(n):
        p, v, kl_max = random_budget_instance(rng)
        B = float(rng.uniform(0.01, 0.95)) * kl_max
        sol = fr.budget_dual_solve(p, v, B, beta_cap=1e4)
        acc.add(oracle.kl(sol.q, p), B)
        prev = -np.inf
        for Bg in np.linspace(0.0, 0.95 * kl_max, 8):
            bs = fr.budget_dual_solve(p, v, float(Bg), beta_cap=1e4).beta
            mono.flag(bs >= prev, max(0.0, prev - bs))
            prev = bs
    return [acc.report(), mono.report()]


@suite("fem_read.capacity", 100)
def _capacity(rng, n, fault):
    acc = _Acc("posterior argmax = value argmax (lam = 1, beta = 200/gap_min)", 0.0, "fraction_missed", n=n)
    missed = total = 0
    for _ in range(n):
        w, v, _ = random_instance(rng)
        gaps = [_margin(_row(w, v, t, c)[1]) for t in range(v.shape[0]) for c in range(v.shape[1])]
        gmin = min(g for g in gaps if np.isfinite(g)) if any(np.isfinite(g) for g in gaps) else 1.0
        beta = np.full(v.shape[1], 200.0 / gmin)
        q = fr.posterior(w, v, beta)
        for t in range(v.shape[0]):
            s = np.flatnonzero(w[t] > 0)
            for c in range(v.shape[1]):
                total += 1
                missed += s[np.argmax(v[s, c])] != np.argmax(q[t, :, c])
    frac = missed / max(total, 1)
    acc.flag(missed == 0, frac)
    return [acc.report()]


@suite("fem_read.two_gate")
def _two_gate(rng, n, fault):
    acc = _Acc("two_gate_read vs scalar-loop oracle", 1e-12, "rel", n=n)
    contain = _Acc("g = 1, lam = 0 gives the mean read", 1e-12, n=n)
    for _ in range(n):
        w, v, b = random_instance(rng)
        gates = FemGates(rng.uniform(0, 1, v.shape), rng.uniform(0.2, 2.0, v.shape), b)
        acc.add(fr.two_gate_read(w, v, gates).o, oracle.brute_force_read(w, v, gates).o)
        base = fr.two_gate_read(w, v, FemGates(np.zeros_like(v), np.ones_like(v), b))
        exact = float(np.max(np.abs(base.o - base.mu)))
        contain.flag(exact == 0.0, exact)
        contain.add(base.o, fr.mean_read(w, v))
    return [acc.report(), contain.report()]


@suite("fem_read.backward", 100)
def _backward(rng, n, fault):
    acc = _Acc("two-gate backward vs central differences (v, lam, g, beta, p)", 1e-6, "rel", n=n)
    for _ in range(n):
        w, v, b = random_instance(rng, (0.2, 3.0))
        lam = rng.uniform(0.05, 0.95, v.shape)
        g = rng.uniform(0.2, 2.0, v.shape)
        up = rng.normal(size=v.shape)
        gates = FemGates(lam, g, b)
        rd = fr.two_gate_read(w, v, gates)
        gr = fr.backward_two_gate(rd, up, w, v, gates)
        s = _sign(fault)

        def loss(w_=w, v_=v, lam_=lam, g_=g, b_=b):
            return float(np.sum(up * fr.two_gate_read(w_, v_, FemGates(lam_, g_, b_), cache_posterior=False).o))

        acc.add(s * gr.dv, oracle.finite_diff(lambda x: loss(v_=x), v))
        acc.add(s * gr.dlambda, oracle.finite_diff(lambda x: loss(lam_=x), lam))
        acc.add(s * gr.dg, oracle.finite_diff(lambda x: loss(g_=x), g))
        acc.add(s * gr.dbeta_max, oracle.finite_diff(lambda x: loss(b_=x), b, h=1e-6))
        dp_num = oracle.finite_diff(lambda x: loss(w_=np.where(w > 0, x, 0.0)), w, h=1e-7)
        acc.add(s * gr.dp, np.where(w > 0, dp_num, 0.0))
    return [acc.report()]


@suite("fem_read.prior_logits", 100)
def _prior_logits(rng, n, fault):
    acc = _Acc("dF/d(softmax logits) = (q - p)/beta", 1e-7, n=n)
    for _ in range(n):
        K = int(rng.integers(2, 7))
        logits = rng.normal(0.0, 1.0, K)
        x = rng.normal(0.0, 1.0, K)
        beta = float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))

        def F(bl):
            p = np.exp(bl - bl.max())
            return oracle.brute_free_energy(p / p.sum(), x, beta)

        p = np.exp(logits - logits.max())
        p /= p.sum()
        q = fr.posterior(p[None, :], x[:, None], beta)[0, :, 0]
        acc.add(_sign(fault) * (q - p) / beta, oracle.finite_diff(F, logits, h=1e-5))
    return [acc.report()]


@suite("fem_read.truncation_table", 1)
def _truncation(rng, n, fault):
    got = [[fr.min_truncation_degree(R, e) for e in TRUNCATION_EPS] for R in TRUNCATION_TABLE]
    want = [list(v) for v in TRUNCATION_TABLE.values()]
    return [make_report("min_truncation_degree table", {"R": list(TRUNCATION_TABLE)}, got, want, 0.0)]


@suite("fem_read.hull")
def _hull(rng, n, fault):
    acc = _Acc("channel-wise max outside the 2-point hull", 0.0, n=n)
    acc.flag(not fr.hull_membership_2pt((1, 0), (0, 1), (1, 1)))
    acc.flag(fr.hull_membership_2pt((1, 0), (0, 1), (1, 0)))
    acc.flag(fr.hull_membership_2pt((1, 0), (0, 1), (0.5, 0.5)))
    for _ in range(n):
        d = int(rng.integers(2, 6))
        v1, v2 = rng.normal(size=(2, d))
        if np.all(v1 >= v2) or np.all(v2 >= v1):
            continue
        acc.flag(not fr.hull_membership_2pt(v1, v2, np.maximum(v1, v2)))
    return [acc.report()]


# ----------------------------------------------------------------------------
# priors and tdc


def _stream_vs_dense(acc, dense_w, v, beta, stream):
    mu_s, f_s = stream
    acc.add(mu_s, fr.mean_read(dense_w, v))
    acc.add(f_s, fr.free_energy(dense_w, v, beta))


@suite("priors.streaming", 20)
def _streaming(rng, n, fault):
    accs = {k: _Acc(f"{k} streaming read vs dense", 1e-10, "rel", n=n) for k in ("gla", "decay", "aft", "ssm")}
    for _ in range(n):
        T = int(rng.integers(2, 65))
        d = int(rng.integers(1, 4))
        v = rng.normal(0.0, 1.0, (T, d))
        beta = np.exp(rng.uniform(np.log(0.2), np.log(4.0), d))
        m = int(rng.integers(1, 5))
        params = GlaParams(rng.uniform(0.05, 1.5, (T, m)), rng.uniform(0.05, 1.5, (T, m)), -rng.uniform(0.0, 0.5, T))
        mu, f, _ = gla_stream_read(params, v, beta)
        _stream_vs_dense(accs["gla"], gla_prior(params)[0].weights, v, beta, (mu, f))
        g = -rng.uniform(0.0, 0.5, T)
        _stream_vs_dense(accs["decay"], decay_prior(g).weights, v, beta, decay_stream_read(g, v, beta))
        k = rng.normal(0.0, 2.0, T)
        _stream_vs_dense(accs["aft"], aft_prior(k).weights, v, beta, aft_stream_read(k, v, beta))
        N = int(rng.integers(1, 4))
        h = diagonal_ssm_impulse(-rng.uniform(0.05, 1.0, N), rng.uniform(0, 1, N), rng.uniform(0, 1, N), 0.5, int(rng.integers(1, T + 1)))
        _stream_vs_dense(accs["ssm"], ssm_prior(h, T).weights, v, beta, ssm_stream_read(h, v, beta))
    return [a.report() for a in accs.values()]


@suite("tdc.streaming", 50)
def _tdc_stream(rng, n, fault):
    acc = _Acc("TDC scan vs direct double sum", 1e-10, "rel", n=n)
    for _ in range(n):
        T, Hc = 16, 4
        s = np.logaddexp(0.0, rng.normal(size=(T, Hc)))
        u = rng.normal(size=(T, Hc))
        log_f = -np.cumsum(s, axis=0)
        direct = np.zeros((T, Hc))
        for t in range(T):
            for i in range(t + 1):
                direct[t] += np.exp(-s[i + 1 : t + 1].sum(axis=0)) * u[i]
        acc.add(decay_scan(s, u), direct)
        acc.add(np.einsum("tic,ic->tc", rank1_kernel(log_f), u), direct)
    return [acc.report()]


# ----------------------------------------------------------------------------
# block


@suite("block.backward", 2)
def _block_backward(rng, n, fault):
    acc = _Acc("block backward vs central differences", 1e-5, "grad_rel", n=n)
    worst = 0.0
    for inst in range(n):
        for prior in ("softmax", "gla", "decay", "aft"):
            cfg = BlockConfig(D=16, d=64, r=1, H=2, prior=prior)
            params = init_params(cfg, int(rng.integers(1 << 30)))
            for arr in params.as_dict().values():
                arr[...] = rng.normal(0.0, 0.3, arr.shape)
            x = rng.normal(size=(6, cfg.D))
            dy = rng.normal(size=x.shape)
            y, cache = block_forward(x, params, cfg)
            dx, grads = block_backward(dy, cache, params, cfg)
            blocks = list(params.as_dict().items()) + [("x", x)]
            for name, arr in blocks:
                an = _sign(fault) * (dx if name == "x" else grads[name])
                for _ in range(3):
                    ix = tuple(int(rng.integers(s)) for s in arr.shape)
                    old = arr[ix]
                    arr[ix] = old + FD_STEP
                    fp = float(np.sum(block_forward(x, params, cfg)[0] * dy))
                    arr[ix] = old - FD_STEP
                    fm = float(np.sum(block_forward(x, params, cfg)[0] * dy))
                    arr[ix] = old
                    num = (fp - fm) / (2 * FD_STEP)
                    err = abs(num - an[ix]) / max(abs(num), 1e-3)
                    worst = max(worst, err)
                    acc.flag(err <= 1e-5, err)
    acc.abs = acc.rel = worst
    return [acc.report()]


@suite("block.ablations", 5)
def _block_ablations(rng, n, fault):
    gate = _Acc("+G with g frozen at 1 equals -G", 1e-12, n=n)
    lam0 = _Acc("lam = 0 equals -L,-T", 0.0, n=n)
    for _ in range(n):
        cfg = BlockConfig(D=16, d=8, r=4, H=2)
        params = init_params(cfg, int(rng.integers(1 << 30)))
        for arr in params.as_dict().values():
            arr[...] = rng.normal(0.0, 0.3, arr.shape)
        x = rng.normal(size=(7, cfg.D))
        frozen, _ = block_forward(x, params, cfg, frozen={"g": 1.0})
        off, _ = block_forward(x, params, BlockConfig(D=16, d=8, r=4, H=2, gate=False))
        gate.add(frozen, off)
        a, _ = block_forward(x, params, cfg, frozen={"lam": 0.0})
        b, _ = block_forward(x, params, BlockConfig(D=16, d=8, r=4, H=2, lse=False, temp=False))
        lam0.add(a, b)
    return [gate.report(), lam0.report()]
