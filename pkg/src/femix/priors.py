"""Causal selection priors p_t over past indices.

Every family produces nonnegative scores s_t(i) (zero for i > t) that are row
normalised into a :class:`PriorMatrix`.  Dense constructors are the reference
path; the ``*_stream_read`` functions compute the same normalised reads with
O(1)-per-step recurrences by appending a constant channel to the values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySupport

FAMILIES = ("softmax", "gla", "aft", "decay", "ssm")

GLA_EPS = 1e-6
ROPE_BASE = 10000.0
LOG_CLAMP = 60.0
ROW_SUM_TOL = 1e-12


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PriorMatrix:
    """Row-stochastic, lower-triangular prior with its support pattern."""

    weights: np.ndarray
    support_mask: np.ndarray
    family: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.support_mask, dtype=bool)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or m.shape != w.shape:
            raise ValueError(f"prior must be square T x T, got {w.shape} / {m.shape}")
        if np.any(np.triu(m, 1)):
            raise ValueError("support_mask is not causal")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("prior weights must be finite and nonnegative")
        if np.any(w[~m] != 0):
            raise ValueError("prior has mass outside its support")
        sums = w.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise ValueError(f"prior rows do not sum to 1 (max dev {np.abs(sums - 1).max():.3e})")
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "support_mask", _readonly(m))

    @property
    def T(self) -> int:
        return self.weights.shape[0]

    def support(self, t: int) -> np.ndarray:
        """Indices with positive mass in row ``t``."""
        return np.flatnonzero(self.support_mask[t])


@dataclass(frozen=True)
class RawScores:
    scores: np.ndarray
    family: str = "custom"


@dataclass(frozen=True)
class GlaParams:
    """Positive features and nonpositive per-step log-decay gates for a GLA head."""

    q_feat: np.ndarray
    k_feat: np.ndarray
    log_gates: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q_feat, dtype=np.float64)
        k = np.asarray(self.k_feat, dtype=np.float64)
        g = np.asarray(self.log_gates, dtype=np.float64)
        if q.ndim != 2 or q.shape != k.shape or g.shape != (q.shape[0],):
            raise ValueError("GlaParams expects q, k of shape (T, m) and gates of shape (T,)")
        if np.any(q <= 0) or np.any(k <= 0):
            raise ValueError("GLA features must be strictly positive")
        if np.any(g > 0):
            raise ValueError("GLA log-gates must be <= 0")
        object.__setattr__(self, "q_feat", _readonly(q))
        object.__setattr__(self, "k_feat", _readonly(k))
        object.__setattr__(self, "log_gates", _readonly(g))

    @property
    def log_envelope(self) -> np.ndarray:
        """log D_t = sum_{tau <= t} g_tau."""
        return np.cumsum(self.log_gates)


@dataclass
class StreamState:
    """Sufficient statistics of a linear scan after the last step.

    ``A`` holds key (x) augmented-value accumulators already multiplied by the
    running envelope, ``B`` its key-only column, ``Z`` the last normaliser.
    """

    A: np.ndarray
    B: np.ndarray
    log_envelope: float
    Z: float
    history: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# positional transform


def rope(x: np.ndarray, base: float = ROPE_BASE, inverse: bool = False) -> np.ndarray:
    """Rotary embedding over the last axis; positions run along axis -2.

    ``inverse=True`` applies the transpose rotation (used for backprop).
    """
    T, m = x.shape[-2], x.shape[-1]
    half = m // 2
    if half == 0:
        return np.array(x, copy=True)
    freqs = base ** (-2.0 * np.arange(half) / m)
    ang = np.arange(T)[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    x1 = x[..., 0 : 2 * half : 2]
    x2 = x[..., 1 : 2 * half : 2]
    out = np.array(x, copy=True)
    out[..., 0 : 2 * half : 2] = x1 * cos - x2 * sin
    out[..., 1 : 2 * half : 2] = x1 * sin + x2 * cos
    return out


def gla_features(q: np.ndarray, k: np.ndarray, eps: float = GLA_EPS, use_rope: bool = True):
    """Map raw queries/keys to the positive orthant: ReLU(RoPE(.)) + eps."""
    if use_rope:
        q, k = rope(q), rope(k)
    return np.maximum(q, 0.0) + eps, np.maximum(k, 0.0) + eps


# ----------------------------------------------------------------------------
# array kernels (broadcast over leading axes); the block module uses these directly


def normalize_rows(scores: np.ndarray) -> np.ndarray:
    z = scores.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise EmptySupport("a prior row has no positive score")
    return scores / z


def softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, logits, -np.inf)
    mx = masked.max(axis=-1, keepdims=True)
    if np.any(~np.isfinite(mx)):
        raise EmptySupport("a softmax row is fully masked")
    e = np.exp(masked - mx)
    return e / e.sum(axis=-1, keepdims=True)


def decay_log_kernel(log_gates: np.ndarray) -> np.ndarray:
    """log K[t, i] = sum_{tau=i+1}^{t} g_tau on i <= t, -inf above the diagonal.

    Differences of the log envelope are clamped below at -LOG_CLAMP.
    """
    L = np.cumsum(log_gates, axis=-1)
    diff = L[..., :, None] - L[..., None, :]
    T = log_gates.shape[-1]
    diff = np.clip(diff, -LOG_CLAMP, LOG_CLAMP)
    return np.where(causal_mask(T), diff, -np.inf)


def gla_scores(q_feat, k_feat, log_gates) -> np.ndarray:
    T = q_feat.shape[-2]
    kern = np.exp(decay_log_kernel(log_gates))
    return kern * (q_feat @ np.swapaxes(k_feat, -1, -2)) * causal_mask(T)


def aft_scores(k_logits: np.ndarray) -> np.ndarray:
    """exp(k_i) on i <= t, shifted by the running max so the largest covered term is 1."""
    T = k_logits.shape[-1]
    run_max = np.maximum.accumulate(k_logits, axis=-1)
    e = np.exp(np.minimum(k_logits[..., None, :] - run_max[..., :, None], 0.0))
    return e * causal_mask(T)


def ssm_scores(impulse: np.ndarray, T: int) -> np.ndarray:
    h = np.asarray(impulse, dtype=np.float64)
    lag = np.arange(T)[:, None] - np.arange(T)[None, :]
    out = np.zeros((T, T))
    ok = (lag >= 0) & (lag < h.shape[0])
    out[ok] = h[lag[ok]]
    return out


# ----------------------------------------------------------------------------
# PriorMatrix constructors


def _prior_from_weights(w: np.ndarray, family: str) -> PriorMatrix:
    return PriorMatrix(weights=w, support_mask=w > 0, family=family)


def normalize_scores(s) -> PriorMatrix:
    """Row-normalise nonnegative causal scores; the support is their positivity pattern."""
    family = getattr(s, "family", "custom")
    scores = np.asarray(getattr(s, "scores", s), dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError("scores must be T x T")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and nonnegative")
    if np.any(np.triu(scores, 1) != 0):
        raise ValueError("scores are not causal")
    return _prior_from_weights(normalize_rows(scores), family)


def softmax_prior(logits: np.ndarray, mask: np.ndarray | None = None) -> PriorMatrix:
    logits = np.asarray(logits, dtype=np.float64)
    T = logits.shape[0]
    causal = causal_mask(T)
    mask = causal if mask is None else np.asarray(mask, dtype=bool)
    if np.any(mask & ~causal):
        raise ValueError("mask is not causal")
    return _prior_from_weights(softmax_rows(logits, mask), "softmax")


def gla_prior(params: GlaParams) -> tuple[PriorMatrix, StreamState]:
    """Dense GLA prior plus the key-only stream state (normalisers per step)."""
    s = gla_scores(params.q_feat, params.k_feat, params.log_gates)
    prior = _prior_from_weights(normalize_rows(s), "gla")
    T = s.shape[0]
    _, state = _gla_scan(params, np.zeros((T, 0)))
    return prior, state


def aft_prior(k_logits: np.ndarray) -> PriorMatrix:
    k = np.asarray(k_logits, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise ValueError("AFT logits must be finite")
    return _prior_from_weights(normalize_rows(aft_scores(k)), "aft")


def decay_prior(g: np.ndarray) -> PriorMatrix:
    g = np.asarray(g, dtype=np.float64)
    if np.any(g > 0):
        raise ValueError("decay generator must be <= 0")
    return _prior_from_weights(normalize_rows(np.exp(decay_log_kernel(g))), "decay")


def ssm_prior(impulse: np.ndarray, T: int) -> PriorMatrix:
    h = np.asarray(impulse, dtype=np.float64)
    if h.ndim != 1 or h.size < 1 or np.any(h < 0):
        raise ValueError("impulse must be a nonempty nonnegative vector")
    s = ssm_scores(h, T)
    # denominator = the same causal convolution applied to an all-ones stream
    z = np.convolve(np.ones(T), h)[:T]
    if np.any(z <= 0):
        raise EmptySupport("an SSM row covers only zero impulse taps")
    return _prior_from_weights(s / z[:, None], "ssm")


def diagonal_ssm_impulse(log_a: np.ndarray, b: np.ndarray, c: np.ndarray, skip: float, length: int) -> np.ndarray:
    """H(0) = skip, H(tau) = sum_n c_n a_n^(tau-1) b_n for a diagonal SSM with 0 < a_n < 1.

    Nonnegativity requires b, c, skip >= 0 and log_a <= 0.
    """
    tau = np.arange(1, length)
    h = np.empty(length)
    h[0] = skip
    h[1:] = (np.exp(np.outer(tau - 1, log_a)) * (b * c)).sum(axis=1)
    return h


# ----------------------------------------------------------------------------
# streaming reads


def _linear_scan(log_decay, keys, queries, x, col_log_scale=None):
    """state_t = exp(log_decay_t) * state_{t-1} * exp(col_log_scale_t) + keys_t (x) x_t;
    out_t = queries_t . state_t.  Returns (outputs (T, w), final state)."""
    T, m = keys.shape
    w = x.shape[1]
    state = np.zeros((m, w))
    out = np.empty((T, w))
    for t in range(T):
        factor = np.exp(log_decay[t])
        if col_log_scale is not None:
            state *= factor * np.exp(col_log_scale[t])[None, :]
        else:
            state *= factor
        state += np.outer(keys[t], x[t])
        out[t] = queries[t] @ state
    return out, state


def _lse_augment(v: np.ndarray, beta: np.ndarray | None):
    """Augmented stream [v, exp(beta v - M_t), 1] with running per-channel max M_t.

    Returns (x, col_log_scale, M) where col_log_scale rescales the exp columns
    of the state whenever the running max grows.
    """
    T, d = v.shape
    if beta is None:
        x = np.concatenate([v, np.ones((T, 1))], axis=1)
        return x, None, None
    bv = v * beta[None, :]
    M = np.maximum.accumulate(bv, axis=0)
    prev = np.vstack([M[:1], M[:-1]])
    shift = np.zeros((T, 2 * d + 1))
    shift[:, d : 2 * d] = prev - M
    x = np.concatenate([v, np.exp(bv - M), np.ones((T, 1))], axis=1)
    return x, shift, M


def _finish_reads(num, d, beta, M):
    den = num[:, -1:]
    mu = num[:, :d] / den
    if beta is None:
        return mu, None
    f_max = (M + np.log(num[:, d : 2 * d] / den)) / beta[None, :]
    return mu, f_max


def _gla_scan(params: GlaParams, v: np.ndarray, beta=None):
    x, shift, M = _lse_augment(v, beta)
    out, state = _linear_scan(params.log_gates, params.k_feat, params.q_feat, x, shift)
    st = StreamState(
        A=state,
        B=state[:, -1].copy(),
        log_envelope=float(params.log_envelope[-1]),
        Z=float(out[-1, -1]),
        history={"Z": out[:, -1].copy()},
    )
    return out, st


def gla_stream_read(params: GlaParams, v: np.ndarray, beta: np.ndarray | None = None):
    """One pass of the GLA scan over [v, (exp(beta v)), 1].

    Returns ``(mu, f_max, state)``; ``f_max`` is None when ``beta`` is None.
    """
    v = np.asarray(v, dtype=np.float64)
    out, st = _gla_scan(params, v, beta)
    M = None if beta is None else np.maximum.accumulate(v * beta[None, :], axis=0)
    mu, f_max = _finish_reads(out, v.shape[1], beta, M)
    return mu, f_max, st


def decay_stream_read(g: np.ndarray, v: np.ndarray, beta: np.ndarray | None = None):
    """LRNN-decay read: C_t = Gamma-scaled accumulator, normaliser from the ones channel."""
    v = np.asarray(v, dtype=np.float64)
    T = v.shape[0]
    x, shift, M = _lse_augment(v, beta)
    ones = np.ones((T, 1))
    out, _ = _linear_scan(np.asarray(g, dtype=np.float64), ones, ones, x, shift)
    return _finish_reads(out, v.shape[1], beta, M)


def aft_stream_read(k_logits: np.ndarray, v: np.ndarray, beta: np.ndarray | None = None):
    """S_t = S_{t-1} + e^{k_t} v_t, Z_t = Z_{t-1} + e^{k_t}, stabilised by the running max of k."""
    v = np.asarray(v, dtype=np.float64)
    k = np.asarray(k_logits, dtype=np.float64)
    T = v.shape[0]
    run = np.maximum.accumulate(k)
    prev = np.concatenate([run[:1], run[:-1]])
    x, shift, M = _lse_augment(v, beta)
    ones = np.ones((T, 1))
    out, _ = _linear_scan(prev - run, np.exp(k - run)[:, None], ones, x, shift)
    return _finish_reads(out, v.shape[1], beta, M)


def ssm_stream_read(impulse: np.ndarray, v: np.ndarray, beta: np.ndarray | None = None):
    """Causal FIR scan with a ring buffer of the last L inputs; the ones channel gives Z_t."""
    h = np.asarray(impulse, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    T, d = v.shape
    L = h.shape[0]
    buf = np.zeros((L, d))
    mu = np.empty((T, d))
    f_max = None if beta is None else np.empty((T, d))
    for t in range(T):
        buf = np.roll(buf, 1, axis=0)
        buf[0] = v[t]
        n = min(L, t + 1)
        taps = h[:n]
        z = taps.sum()
        if z <= 0:
            raise EmptySupport(f"SSM row {t} covers only zero taps")
        window = buf[:n]
        mu[t] = taps @ window / z
        if beta is not None:
            bv = window * beta[None, :]
            live = taps > 0
            m = bv[live].max(axis=0)
            f_max[t] = (m + np.log(taps @ np.exp(bv - m) / z)) / beta
    return mu, f_max


def stream_read_equivalence(params: GlaParams, values: np.ndarray):
    """Normalised GLA read via the dense prior and via the scan: ``(dense_mu, stream_mu)``."""
    v = np.asarray(values, dtype=np.float64)
    prior, _ = gla_prior(params)
    dense_mu = prior.weights @ v
    stream_mu, _, _ = gla_stream_read(params, v)
    return dense_mu, stream_mu
