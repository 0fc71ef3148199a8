"""A pre-norm residual FEM layer under the 4Dd + Ddr parameter budget.

Layout of the prior block ``W_prior`` (D x r d): the first r d / 2 columns are
queries, the rest keys, both split evenly over heads.  Families without a
query/key dot product reuse the key path: decay gates are
-softplus(mean(head keys) + b_decay) / 16 and AFT logits are sum(head keys) / sqrt(m).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .fem_read import FemGates, FemReadout, backward_two_gate, two_gate_read
from .priors import (
    GLA_EPS,
    LOG_CLAMP,
    aft_scores,
    causal_mask,
    decay_log_kernel,
    normalize_rows,
    rope,
    softmax_rows,
)
from .tdc import CouplingHeads, TdcParams, default_hidden_width, split_slices, tdc_backward, tdc_couple, tdc_forward

BLOCK_PRIORS = ("softmax", "gla", "decay", "aft")
BETA_SHIFT = 1.8
INIT_STD = 0.02
DECAY_SCALE = 16.0
LINEAR_FIELDS = ("W_V", "W_O", "W_lam", "W_g", "W_prior")

_FAMILY_TAGS = {"softmax": "SM", "gla": "GLA", "decay": "LRNN", "aft": "AFT"}


@dataclass(frozen=True)
class BlockConfig:
    D: int
    d: int
    r: int
    H: int = 1
    prior: str = "softmax"
    conv: bool = True
    lse: bool = True
    temp: bool = True
    gate: bool = True
    rope: bool = True

    def __post_init__(self):
        if min(self.D, self.d, self.r, self.H) < 1:
            raise ValueError("D, d, r, H must be positive")
        if self.d % self.H:
            raise ValueError(f"d={self.d} is not divisible by H={self.H}")
        if (self.r * self.d) % (2 * self.H):
            raise ValueError("r*d must split evenly into query/key halves per head")
        if self.prior not in BLOCK_PRIORS:
            raise ValueError(f"prior must be one of {BLOCK_PRIORS}")

    @property
    def qk_dim(self) -> int:
        return self.r * self.d // 2

    @property
    def head_qk(self) -> int:
        return self.qk_dim // self.H

    @property
    def head_v(self) -> int:
        return self.d // self.H

    @property
    def hidden(self) -> int:
        return default_hidden_width(self.d)

    @property
    def cond_width(self) -> int:
        return 4 * self.hidden

    def label(self) -> str:
        flags = ",".join(("+" if on else "-") + k for k, on in zip("CLTG", (self.conv, self.lse, self.temp, self.gate)))
        return f"FEM-{_FAMILY_TAGS[self.prior]}({flags})"


@dataclass
class FemBlockParams:
    W_V: np.ndarray
    W_O: np.ndarray
    W_lam: np.ndarray
    W_g: np.ndarray
    W_prior: np.ndarray
    b_lam: np.ndarray
    b_g: np.ndarray
    b_decay: np.ndarray
    beta_raw: np.ndarray
    W_f: np.ndarray
    W_x: np.ndarray
    W_s: np.ndarray
    W_c: np.ndarray
    M_p: np.ndarray
    M_v: np.ndarray
    M_g: np.ndarray
    M_l: np.ndarray

    @property
    def tdc(self) -> TdcParams:
        return TdcParams(self.W_f, self.W_x, self.W_s, self.W_c)

    @property
    def heads(self) -> CouplingHeads:
        return CouplingHeads(self.M_p, self.M_v, self.M_g, self.M_l)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, tensors: dict) -> "FemBlockParams":
        return cls(**{f.name: np.asarray(tensors[f.name], dtype=np.float64) for f in fields(cls)})

    def copy(self) -> "FemBlockParams":
        return FemBlockParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})

    def linear_param_count(self) -> int:
        """Budgeted projections only (biases, norms and the conditioner excluded)."""
        return int(sum(getattr(self, k).size for k in LINEAR_FIELDS))

    def beta_max(self) -> np.ndarray:
        return nn.softplus(self.beta_raw + BETA_SHIFT)


def param_budget_check(D: int, d, r: int) -> tuple[int, bool]:
    """Budgeted projection count ``4Dd + Ddr`` and whether it equals ``4D^2``.

    ``d`` may be a :class:`fractions.Fraction` to test allocations whose width
    is not an integer for the given D.
    """
    count = 4 * D * d + D * d * r
    return count, count == 4 * D * D


def init_params(config: BlockConfig, seed: int) -> FemBlockParams:
    """Projections ~ N(0, 0.02^2); biases, beta_raw and modulation heads start at zero."""
    cfg = config
    rng = np.random.default_rng(seed)
    D, d = cfg.D, cfg.d

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    W_V = normal(D, d)
    W_O = normal(d, D)
    W_lam = normal(D, d)
    W_g = normal(D, d)
    W_prior = normal(D, cfg.r * d)
    tdc = TdcParams.init(D, cfg.hidden, cfg.cond_width, rng, INIT_STD)
    heads = CouplingHeads.zeros(cfg.hidden, cfg.r * d, d)
    return FemBlockParams(
        W_V=W_V,
        W_O=W_O,
        W_lam=W_lam,
        W_g=W_g,
        W_prior=W_prior,
        b_lam=np.zeros(d),
        b_g=np.zeros(d),
        b_decay=np.zeros(cfg.H),
        beta_raw=np.zeros(d),
        W_f=tdc.W_f,
        W_x=tdc.W_x,
        W_s=tdc.W_s,
        W_c=tdc.W_c,
        M_p=heads.M_p,
        M_v=heads.M_v,
        M_g=heads.M_g,
        M_l=heads.M_l,
    )


# ----------------------------------------------------------------------------
# prior from the (modulated) prior-block projection


def _heads(a: np.ndarray, H: int) -> np.ndarray:
    T, w = a.shape
    return a.reshape(T, H, w // H).transpose(1, 0, 2)


def _unheads(a: np.ndarray) -> np.ndarray:
    H, T, w = a.shape
    return a.transpose(1, 0, 2).reshape(T, H * w)


def _prior_forward(theta: np.ndarray, cfg: BlockConfig, params: FemBlockParams) -> dict:
    T = theta.shape[0]
    m = cfg.head_qk
    Q = _heads(theta[:, : cfg.qk_dim], cfg.H)
    K = _heads(theta[:, cfg.qk_dim :], cfg.H)
    mask = causal_mask(T)
    pc = {"Q": Q, "K": K, "mask": mask}
    if cfg.prior in ("softmax", "gla"):
        qr, kr = (rope(Q), rope(K)) if cfg.rope else (Q, K)
        pc.update(qr=qr, kr=kr)
    if cfg.prior == "softmax":
        logits = qr @ np.swapaxes(kr, -1, -2) / np.sqrt(m)
        pc["w"] = softmax_rows(logits, mask)
        return pc
    if cfg.prior in ("gla", "decay"):
        z = K.mean(axis=-1) + params.b_decay[:, None]
        log_g = -nn.softplus(z) / DECAY_SCALE
        log_kern = decay_log_kernel(log_g)
        kern = np.exp(log_kern)
        pc.update(z=z, log_g=log_g, kern=kern, live=mask & (log_kern > -LOG_CLAMP))
        if cfg.prior == "gla":
            qt = np.maximum(qr, 0.0) + GLA_EPS
            kt = np.maximum(kr, 0.0) + GLA_EPS
            A = qt @ np.swapaxes(kt, -1, -2)
            pc.update(qt=qt, kt=kt, A=A)
            s = kern * A * mask
        else:
            s = kern
    else:  # aft
        k = K.sum(axis=-1) / np.sqrt(m)
        s = aft_scores(k)
        pc["k"] = k
    pc["s"] = s
    pc["w"] = normalize_rows(s)
    return pc


def _prior_backward(dw: np.ndarray, pc: dict, cfg: BlockConfig):
    """Returns (dtheta, db_decay)."""
    m = cfg.head_qk
    w = pc["w"]
    dQ = np.zeros_like(pc["Q"])
    dK = np.zeros_like(pc["K"])
    db = np.zeros(cfg.H)
    centred = dw - (w * dw).sum(axis=-1, keepdims=True)
    if cfg.prior == "softmax":
        dlog = w * centred / np.sqrt(m)
        dqr = dlog @ pc["kr"]
        dkr = np.swapaxes(dlog, -1, -2) @ pc["qr"]
    else:
        ds = centred / pc["s"].sum(axis=-1, keepdims=True)
        dqr = dkr = None
        if cfg.prior in ("gla", "decay"):
            if cfg.prior == "gla":
                dA = ds * pc["kern"] * pc["mask"]
                dqt = dA @ pc["kt"]
                dkt = np.swapaxes(dA, -1, -2) @ pc["qt"]
                dqr = dqt * (pc["qr"] > 0)
                dkr = dkt * (pc["kr"] > 0)
                dkern = ds * pc["A"]
            else:
                dkern = ds
            dlogk = np.where(pc["live"], dkern * pc["kern"], 0.0)
            dL = dlogk.sum(axis=-1) - dlogk.sum(axis=-2)
            dlog_g = np.flip(np.cumsum(np.flip(dL, -1), axis=-1), -1)
            dz = -dlog_g * nn.sigmoid(pc["z"]) / DECAY_SCALE
            dK += dz[..., None] / m
            db = dz.sum(axis=-1)
        else:
            dk = (ds * pc["s"]).sum(axis=-2)
            dK += dk[..., None] / np.sqrt(m)
    if dqr is not None:
        if cfg.rope:
            dqr, dkr = rope(dqr, inverse=True), rope(dkr, inverse=True)
        dQ += dqr
        dK += dkr
    return np.concatenate([_unheads(dQ), _unheads(dK)], axis=1), db


# ----------------------------------------------------------------------------
# forward / backward


@dataclass
class BlockCache:
    x: np.ndarray
    x_hat: np.ndarray
    x_inv: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    z_lam: np.ndarray
    lam: np.ndarray
    z_g: np.ndarray
    g_raw: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    beta: np.ndarray
    tdc_trace: object
    coupled: object
    v_mod: np.ndarray
    lam_eff: np.ndarray
    g_eff: np.ndarray
    prior: dict
    readout: FemReadout
    gates_h: FemGates
    v_h: np.ndarray
    o: np.ndarray
    frozen: dict


def block_forward(x: np.ndarray, params: FemBlockParams, config: BlockConfig, frozen: dict | None = None):
    """y = x + W_O^T o(RMSNorm(x)); returns ``(y, cache)``.

    ``frozen`` may pin ``"lam"`` or ``"g"`` to given arrays after all modulation
    (ablation probes); pinned gates receive no gradient.
    """
    cfg = config
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    if D != cfg.D:
        raise ValueError(f"expected width {cfg.D}, got {D}")
    frozen = dict(frozen or {})
    x_hat, x_inv = nn.rms_norm(x)
    v = x_hat @ params.W_V
    theta = x_hat @ params.W_prior
    z_lam = x_hat @ params.W_lam + params.b_lam
    lam = nn.sigmoid(z_lam)
    z_g = x_hat @ params.W_g + params.b_g
    g_raw = nn.softplus(z_g)
    g, g_inv = nn.rms_norm(g_raw)
    beta = params.beta_max()
    gates = FemGates(lam=lam, g=g, beta_max=beta)

    trace = coupled = None
    if cfg.conv:
        trace = tdc_forward(x_hat, params.tdc)
        coupled = tdc_couple(trace.c, theta, v, gates, params.heads)
        theta_m, v_m, lam_m, g_m = coupled.theta, coupled.v, coupled.gates.lam, coupled.gates.g
    else:
        theta_m, v_m, lam_m, g_m = theta, v, lam, g

    if not cfg.lse:
        lam_eff = np.zeros_like(lam_m)
    elif not cfg.temp:
        lam_eff = np.ones_like(lam_m)
    else:
        lam_eff = lam_m
    g_eff = g_m if cfg.gate else np.ones_like(g_m)
    if "lam" in frozen:
        lam_eff = np.broadcast_to(np.asarray(frozen["lam"], dtype=np.float64), lam_m.shape).copy()
    if "g" in frozen:
        g_eff = np.broadcast_to(np.asarray(frozen["g"], dtype=np.float64), g_m.shape).copy()

    pc = _prior_forward(theta_m, cfg, params)
    H, dh = cfg.H, cfg.head_v
    v_h = _heads(v_m, H)
    gates_h = FemGates(lam=_heads(lam_eff, H), g=_heads(g_eff, H), beta_max=beta.reshape(H, 1, dh))
    readout = two_gate_read(pc["w"], v_h, gates_h)
    o = _unheads(readout.o)
    y = x + o @ params.W_O
    cache = BlockCache(
        x, x_hat, x_inv, v, theta, z_lam, lam, z_g, g_raw, g, g_inv, beta, trace, coupled,
        v_m, lam_eff, g_eff, pc, readout, gates_h, v_h, o, frozen,
    )
    return y, cache


def block_backward(dy: np.ndarray, cache: BlockCache, params: FemBlockParams, config: BlockConfig):
    """Reverse pass of :func:`block_forward`; returns ``(dx, grads)`` keyed like the params."""
    cfg = config
    c = cache
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    grads["W_O"] = c.o.T @ dy
    d_o = _heads(dy @ params.W_O.T, cfg.H)
    rg = backward_two_gate(c.readout, d_o, c.prior["w"], c.v_h, c.gates_h)
    dv_m = _unheads(rg.dv)
    dlam_eff = _unheads(rg.dlambda)
    dg_eff = _unheads(rg.dg)
    dbeta = rg.dbeta_max.reshape(-1)
    dtheta_m, grads["b_decay"] = _prior_backward(rg.dp, c.prior, cfg)

    dlam_m = dlam_eff if (cfg.lse and cfg.temp and "lam" not in c.frozen) else np.zeros_like(dlam_eff)
    dg_m = dg_eff if (cfg.gate and "g" not in c.frozen) else np.zeros_like(dg_eff)

    dx_hat = np.zeros_like(c.x_hat)
    if cfg.conv:
        cp = c.coupled
        inside = (cp.lam_raw > 0.0) & (cp.lam_raw < 1.0)
        dlam_raw = dlam_m * inside
        dlam = dlam_raw * (1.0 + cp.eta_l)
        deta_l = dlam_raw * c.lam
        dg = dg_m * (1.0 + cp.eta_g)
        deta_g = dg_m * c.g
        dv = dv_m * (1.0 + cp.eta_v)
        deta_v = dv_m * c.v
        dtheta = dtheta_m
        c_p, c_v, c_g, c_l = split_slices(c.tdc_trace.c)
        grads["M_p"] = c_p.T @ dtheta_m
        dc_parts = [dtheta_m @ params.M_p.T]
        for name, eta, deta, cs in (("M_v", cp.eta_v, deta_v, c_v), ("M_g", cp.eta_g, deta_g, c_g), ("M_l", cp.eta_l, deta_l, c_l)):
            dz = deta * (1.0 - eta * eta)
            grads[name] = cs.T @ dz
            dc_parts.append(dz @ getattr(params, name).T)
        dc = np.concatenate(dc_parts, axis=1)
        dx_tdc, tgrads = tdc_backward(dc, params.tdc, c.tdc_trace)
        grads.update(tgrads)
        dx_hat += dx_tdc
    else:
        dlam, dg, dv, dtheta = dlam_m, dg_m, dv_m, dtheta_m

    dz_lam = dlam * c.lam * (1.0 - c.lam)
    dg_raw = nn.rms_norm_backward(dg, c.g_raw, c.g_inv)
    dz_g = dg_raw * nn.sigmoid(c.z_g)
    grads["W_lam"] = c.x_hat.T @ dz_lam
    grads["b_lam"] = dz_lam.sum(axis=0)
    grads["W_g"] = c.x_hat.T @ dz_g
    grads["b_g"] = dz_g.sum(axis=0)
    grads["beta_raw"] = dbeta * nn.sigmoid(params.beta_raw + BETA_SHIFT)
    grads["W_V"] = c.x_hat.T @ dv
    grads["W_prior"] = c.x_hat.T @ dtheta
    dx_hat += dv @ params.W_V.T + dtheta @ params.W_prior.T + dz_lam @ params.W_lam.T + dz_g @ params.W_g.T
    dx = dy + nn.rms_norm_backward(dx_hat, c.x, c.x_inv)
    return dx, grads


def ablation(config: BlockConfig, **toggles) -> BlockConfig:
    return replace(config, **toggles)


# ----------------------------------------------------------------------------
# checkpoints: 8-byte magic, u64 header length, JSON header, little-endian f64 data

_MAGIC = b"FEMIXCK1"


def save_params(path, params: FemBlockParams, config: BlockConfig | None = None) -> None:
    tensors = params.as_dict()
    header = {
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
        "config": None if config is None else {f.name: getattr(config, f.name) for f in fields(config)},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path) -> tuple[FemBlockParams, BlockConfig | None]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a femix checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    offset = 16 + n
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    cfg = header.get("config")
    return FemBlockParams.from_dict(tensors), (BlockConfig(**cfg) if cfg else None)
