"""Elementwise activations and row norms with hand-written backward passes."""
from __future__ import annotations

import numpy as np

RMS_EPS = 1e-6
LN_EPS = 1e-5


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def softplus(z):
    z = np.asarray(z)
    return np.logaddexp(0.0, z).astype(np.result_type(z, np.float32), copy=False)


def silu(z):
    return z * sigmoid(z)


def silu_grad(z):
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def rms_norm(x, eps: float = RMS_EPS):
    """x / sqrt(mean(x^2) + eps) over the last axis; returns (y, inv_rms)."""
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * inv, inv


def rms_norm_backward(dy, x, inv):
    n = x.shape[-1]
    return inv * (dy - x * (inv * inv) * (dy * x).sum(axis=-1, keepdims=True) / n)


def layer_norm(x, eps: float = LN_EPS):
    """Affine-free layer norm over the last axis; returns (y, inv_std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def layer_norm_backward(dy, y, inv):
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def unit_norm(x, eps: float = 1e-12):
    """x / ||x||_2 over the last axis; returns (y, norm)."""
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / n, n


def unit_norm_backward(dy, y, n):
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / n
