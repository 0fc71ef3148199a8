"""Single-layer value mixers for the channel-wise argmax task, AdamW, and the training loop.

Both mixers read the raw value rows directly (no value or output projection),
with output taken at the last position.  They share a multi-head softmax prior
whose logits for head h are x_i . (W_K,h q_h) / sqrt(m), q = x_T W_Q.  The
baseline returns the prior mean; the FEM mixer returns the linearised-temperature
free-energy read with learned per-channel lambda and beta_max (outer gate and
conditioner off).
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .fem_read import FemGates, backward_two_gate, two_gate_read
from .tasks import ArgmaxTaskConfig, gen_argmax_task, index_accuracy

MODELS = ("fem", "softmax")
BETA_SHIFT = 1.8
INIT_STD = 0.02


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    model: str = "fem"
    heads: int = 4
    eval_every: int = 50
    eval_batch: int = 250
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        for name in ("batch", "heads", "eval_every", "eval_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.weight_decay < 0:
            raise ValueError("invalid optimizer hyperparameters")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def ci_preset() -> tuple[ArgmaxTaskConfig, TrainConfig]:
    return ArgmaxTaskConfig(T=64, D=128), TrainConfig(steps=500)


# ----------------------------------------------------------------------------
# models


class ToyMixer:
    """Shared softmax prior; subclasses choose the read."""

    vector_params: tuple[str, ...] = ()

    def __init__(self, D: int, heads: int, seed: int = 0, dtype=np.float32):
        if D % heads:
            raise ValueError(f"D={D} is not divisible by heads={heads}")
        self.D, self.H, self.m = D, heads, D // heads
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = {
            "W_Q": rng.normal(0.0, INIT_STD, (D, D)).astype(self.dtype),
            "W_K": rng.normal(0.0, INIT_STD, (D, D)).astype(self.dtype),
        }

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def linear_param_count(self) -> int:
        return int(sum(p.size for k, p in self.params.items() if k not in self.vector_params))

    def _heads(self, X):
        B, T, _ = X.shape
        return X.reshape(B, T, self.H, self.m).transpose(0, 2, 1, 3)  # (B, H, T, m)

    def _prior(self, X):
        B = X.shape[0]
        q = (X[:, -1] @ self.params["W_Q"]).reshape(B, self.H, self.m)
        W_K = self.params["W_K"].reshape(self.D, self.H, self.m).transpose(1, 2, 0)  # (H, m, D)
        u = (q.transpose(1, 0, 2) @ W_K).transpose(1, 0, 2)
        logits = u @ np.swapaxes(X, 1, 2) / math.sqrt(self.m)
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        return p[:, :, None, :], (q, u)  # rows of shape (1, T) per head

    def _prior_backward(self, dp, p, X, q):
        B = X.shape[0]
        p, dp = p[:, :, 0, :], dp[:, :, 0, :]
        dlog = p * (dp - (p * dp).sum(axis=-1, keepdims=True)) / math.sqrt(self.m)
        du = dlog @ X
        W_K = self.params["W_K"].reshape(self.D, self.H, self.m).transpose(1, 0, 2)  # (H, D, m)
        du_h = du.transpose(1, 0, 2)
        dq = (du_h @ W_K).transpose(1, 0, 2)
        dW_K = np.swapaxes(du_h, 1, 2) @ q.transpose(1, 0, 2)  # (H, D, m)
        return {
            "W_Q": X[:, -1].T @ dq.reshape(B, self.D),
            "W_K": dW_K.transpose(1, 0, 2).reshape(self.D, self.D),
        }

    def _merge(self, o):
        B = o.shape[0]
        return o[:, :, 0, :].reshape(B, self.D)  # (B, H, 1, m) -> (B, D)

    def predict(self, X):
        return self.forward(X)[0]


class SoftmaxMixer(ToyMixer):
    """y = sum_i p_i x_i per head: a convex combination of the value rows."""

    def forward(self, X):
        p, (q, _) = self._prior(X)
        y = self._merge(p @ self._heads(X))
        return y, (X, p, q)

    def backward(self, dy, cache):
        X, p, q = cache
        B = X.shape[0]
        d_o = dy.reshape(B, self.H, 1, self.m)
        dp = d_o @ np.swapaxes(self._heads(X), -1, -2)
        return self._prior_backward(dp, p, X, q)


class FemMixer(ToyMixer):
    """y = (1 - lam) mu + lam F_max per channel with lam = sigmoid(lam_raw), beta = softplus(beta_raw + 1.8)."""

    vector_params = ("lam_raw", "beta_raw")

    def __init__(self, D: int, heads: int, seed: int = 0, dtype=np.float32):
        super().__init__(D, heads, seed, dtype)
        self.params["lam_raw"] = np.zeros(D, dtype=self.dtype)
        self.params["beta_raw"] = np.zeros(D, dtype=self.dtype)

    def _gates(self):
        lam = nn.sigmoid(self.params["lam_raw"]).reshape(self.H, 1, self.m)
        beta = nn.softplus(self.params["beta_raw"] + BETA_SHIFT).reshape(self.H, 1, self.m)
        return FemGates(lam=lam, g=np.ones((), dtype=self.dtype), beta_max=beta)

    def forward(self, X, keep_posterior: bool = True):
        p, (q, _) = self._prior(X)
        v = self._heads(X)
        gates = self._gates()
        readout = two_gate_read(p, v, gates, cache_posterior=keep_posterior)
        return self._merge(readout.o), (X, p, q, v, gates, readout)

    def predict(self, X):
        return self.forward(X, keep_posterior=False)[0]

    def backward(self, dy, cache):
        X, p, q, v, gates, readout = cache
        B = X.shape[0]
        up = dy.reshape(B, self.H, 1, self.m)
        rg = backward_two_gate(readout, up, p, v, gates)
        grads = self._prior_backward(rg.dp, p, X, q)
        lam = gates.lam.reshape(-1)
        dlam = rg.dlambda.sum(axis=0).reshape(-1)
        grads["lam_raw"] = dlam * lam * (1.0 - lam)
        grads["beta_raw"] = np.asarray(rg.dbeta_max).reshape(-1) * nn.sigmoid(self.params["beta_raw"] + BETA_SHIFT)
        return grads

    def beta_max(self) -> np.ndarray:
        return nn.softplus(self.params["beta_raw"] + BETA_SHIFT)


def build_model(tag: str, D: int, heads: int, seed: int = 0, dtype=np.float32) -> ToyMixer:
    if tag == "fem":
        return FemMixer(D, heads, seed, dtype)
    if tag == "softmax":
        return SoftmaxMixer(D, heads, seed, dtype)
    raise ValueError(f"unknown model {tag!r}")


def mse_loss(y, target):
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        """Decoupled weight decay, bias-corrected moments; updates ``params`` in place."""
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: str
    final_val_mse: float
    final_index_accuracy: float
    history: list[dict]
    param_count: int
    linear_param_count: int
    seconds: float
    mixer: ToyMixer | None = None
    step_losses: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("history", "mixer", "step_losses")}
        return d


def evaluate(model: ToyMixer, task: ArgmaxTaskConfig, batch: int, dtype) -> tuple[float, float]:
    sq, hits, n_ch = 0.0, 0.0, 0
    for b in gen_argmax_task(task, batch, split="val", dtype=dtype):
        y = model.predict(b.V)
        sq += float(np.sum((y.astype(np.float64) - b.y_star) ** 2))
        hits += index_accuracy(y, b.V, b.a) * b.a.size
        n_ch += b.a.size
    if n_ch == 0:
        return float("nan"), float("nan")
    return sq / n_ch, hits / n_ch


def train_toy(model_tag: str, task: ArgmaxTaskConfig, train: TrainConfig, csv_path=None, log=None) -> TrainResult:
    """Train one mixer with AdamW on MSE; evaluates every ``eval_every`` steps and at the end.

    Raises :class:`TrainingDiverged` if the training loss stops being finite.
    """
    dtype = np.dtype(train.dtype)
    model = build_model(model_tag, task.D, train.heads, seed=train.seed, dtype=dtype)
    opt = AdamW(train.lr, train.beta1, train.beta2, train.adam_eps, train.weight_decay)
    stream = gen_argmax_task(task, train.batch, split="train", dtype=dtype, epochs=None)
    history: list[dict] = []
    losses: list[float] = []
    t0 = time.perf_counter()

    def record(step, train_mse):
        val_mse, acc = evaluate(model, task, train.eval_batch, dtype)
        row = {"step": step, "train_mse": train_mse, "val_mse": val_mse, "index_accuracy": acc}
        history.append(row)
        if log:
            log(row)

    record(0, float("nan"))
    for step in range(1, train.steps + 1):
        batch = next(stream)
        y, cache = model.forward(batch.V)
        loss, dy = mse_loss(y, batch.y_star.astype(dtype))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        losses.append(loss)
        grads = model.backward(dy.astype(dtype), cache)
        opt.step(model.params, grads)
        if step % train.eval_every == 0 or step == train.steps:
            record(step, loss)
    seconds = time.perf_counter() - t0

    if csv_path is not None:
        write_metrics_csv(csv_path, history)
    last = history[-1]
    return TrainResult(
        model=model_tag,
        final_val_mse=last["val_mse"],
        final_index_accuracy=last["index_accuracy"],
        history=history,
        param_count=model.param_count(),
        linear_param_count=model.linear_param_count(),
        seconds=seconds,
        mixer=model,
        step_losses=losses,
    )


def write_metrics_csv(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "train_mse", "val_mse", "index_accuracy"])
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


TASK_KEYS = ("T", "D", "delta", "sigma", "n_train", "n_val")
TRAIN_KEYS = ("steps", "batch", "lr", "beta1", "beta2", "adam_eps", "weight_decay", "heads", "eval_every", "eval_batch", "dtype")
CONFIG_KEYS = TASK_KEYS + TRAIN_KEYS + ("models", "preset", "seed")


def train_config_from_dict(raw: dict, seed: int | None = None) -> tuple[ArgmaxTaskConfig, TrainConfig, list[str]]:
    """Flat JSON schema: task and optimizer fields side by side, plus ``models`` and ``preset``.

    ``preset`` ("full" or "ci") supplies the base values that the other keys override.
    """
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    preset = raw.get("preset", "full")
    if preset == "full":
        task, train = ArgmaxTaskConfig(), TrainConfig()
    elif preset == "ci":
        task, train = ci_preset()
    else:
        raise ValueError("preset must be 'full' or 'ci'")
    if seed is None:
        seed = int(raw.get("seed", 0))
    task = ArgmaxTaskConfig(**{**task.to_dict(), **{k: raw[k] for k in TASK_KEYS if k in raw}, "seed": seed})
    train = TrainConfig(**{**train.to_dict(), **{k: raw[k] for k in TRAIN_KEYS if k in raw}, "seed": seed})
    models = raw.get("models", list(MODELS))
    if isinstance(models, str):
        models = [models]
    bad = [m for m in models if m not in MODELS]
    if bad or not models:
        raise ValueError(f"models must be a nonempty subset of {MODELS}")
    return task, train, list(models)


def load_train_config(path, seed: int | None = None):
    return train_config_from_dict(json.loads(Path(path).read_text()), seed)
