"""Monte Carlo training of the Spiking UNet: weighted v-prediction loss plus SCL loss, Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import tensor as tc
from .schedule import NoiseSchedule, q_sample, velocity_target
from .snn import decode_folded, encode_folded
from .tensor import Tensor

log = logging.getLogger(__name__)


class Network(Protocol):
    num_steps: int

    def __call__(self, x: Tensor, t, training: bool = False) -> Tensor: ...

    def trainable(self) -> list[Tensor]: ...


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    scl: bool = True
    signal_loss: bool = False
    seed: int = 0
    clip_grad: float | None = None
    log_every: int = 100
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class LossBreakdown:
    """Batch means of the loss parts; per-sample parts are kept for auditing."""

    l_ddpm: float
    l_scl: float
    l_signal: float | None
    total: float
    t: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    ddpm_per_sample: np.ndarray
    scl_per_sample: np.ndarray
    signal_per_sample: np.ndarray | None
    scl_enabled: bool = True

    def recompute_total(self) -> float:
        total = self.gamma * self.ddpm_per_sample
        if self.scl_enabled:
            total = total + self.lam * self.scl_per_sample
        if self.signal_per_sample is not None:
            total = total + self.lam * self.signal_per_sample
        return float(np.mean(total))

    def log_line(self, step: int) -> str:
        return (
            f"step={step} t={int(np.round(np.mean(self.t)))} l_ddpm={self.l_ddpm:.6g} "
            f"l_scl={self.l_scl:.6g} total={self.total:.6g}"
        )


def signal_loss(y_hat, z, t, sched: NoiseSchedule):
    """lambda_t * mean squared error between the encoded target and the network output.

    ``y_hat`` is a time-major folded current signal (S*B, H, W, C) and ``z``
    the image-space target (B, H, W, C); tensors or arrays. Returns per-sample
    values (B,).
    """
    yd = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    b = zd.shape[0]
    s = yd.shape[0] // b
    resid = yd.reshape((s,) + zd.shape) - zd[None]
    lam = sched.lam[np.broadcast_to(np.asarray(t), (b,))]
    return lam * np.mean(resid**2, axis=(0, 2, 3, 4))


def scl_residual(y_hat: np.ndarray, num_steps: int) -> np.ndarray:
    """Per-sample mean squared distance of a folded output from its enc(dec(.)) projection."""
    y = np.asarray(y_hat)
    y5 = y.reshape((num_steps, y.shape[0] // num_steps) + y.shape[1:])
    return np.mean((y5 - y5.mean(axis=0, keepdims=True)) ** 2, axis=(0, 2, 3, 4))


def _sample_mse(diff: Tensor, axes) -> Tensor:
    return tc.mean(tc.mul(diff, diff), axis=axes)


def training_step(
    model: Network,
    x0: np.ndarray,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    step: int = 0,
) -> tuple[tc.Gradients, LossBreakdown]:
    """One Monte Carlo sample of the total loss and its gradients.

    One diffusion step t is drawn per batch element. ``x0`` is a (B, H, W, C)
    batch already scaled to [-1, 1].
    """
    x0 = np.asarray(x0)
    b = x0.shape[0]
    s = model.num_steps
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    v = velocity_target(x0, eps, t, sched)
    gamma = sched.gamma[t].astype(x0.dtype)
    lam = sched.lam[t].astype(x0.dtype)

    with tc.GradTape() as tape:
        y = model(encode_folded(Tensor(x_t), s), t, training=True)
        dec = decode_folded(y, s)
        l_ddpm = _sample_mse(tc.add(dec, Tensor(-v)), (1, 2, 3))
        y5 = tc.reshape(y, (s, b) + x0.shape[1:])
        resid = tc.add(y5, tc.scale(tc.reshape(dec, (1,) + dec.shape), -1.0))
        l_scl = _sample_mse(resid, (0, 2, 3, 4))
        total = tc.mul(l_ddpm, Tensor(gamma))
        if cfg.scl:
            total = tc.add(total, tc.mul(l_scl, Tensor(lam)))
        l_sig = None
        if cfg.signal_loss:
            l_sig = _sample_mse(tc.add(y5, Tensor(-v[None])), (0, 2, 3, 4))
            total = tc.add(total, tc.mul(l_sig, Tensor(lam)))
        loss = tc.mean(total)

    parts = LossBreakdown(
        l_ddpm=float(l_ddpm.data.mean()),
        l_scl=float(l_scl.data.mean()),
        l_signal=None if l_sig is None else float(l_sig.data.mean()),
        total=float(loss.data),
        t=t,
        gamma=gamma,
        lam=lam,
        ddpm_per_sample=l_ddpm.data.copy(),
        scl_per_sample=l_scl.data.copy(),
        signal_per_sample=None if l_sig is None else l_sig.data.copy(),
        scl_enabled=cfg.scl,
    )
    if not np.isfinite(parts.total):
        raise FloatingPointError(
            f"non-finite loss at step={step} t={t.tolist()} l_ddpm={parts.l_ddpm} "
            f"l_scl={parts.l_scl} l_signal={parts.l_signal}"
        )
    grads = tape.backward(loss) if any(p.requires_grad for p in model.trainable()) else tc.Gradients({}, {})
    return grads, parts


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam; replaces each parameter's array, never mutates it."""
    state.step += 1
    k = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1**k, 1 - b2**k
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if state.m[name].shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}: {state.m[name].shape} vs {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


def named_gradients(params: dict[str, Tensor], grads: tc.Gradients, clip: float | None = None) -> dict[str, np.ndarray]:
    out = {name: grads[p] for name, p in params.items()}
    if clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in out.values())))
        if norm > clip:
            out = {k: g * (clip / norm) for k, g in out.items()}
    return out


@dataclass
class TrainResult:
    model: object
    optimizer: AdamState
    history: list[LossBreakdown]
    step: int


def train_loop(
    dataset: np.ndarray,
    model,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    checkpoint_sink: Callable[[int, object, AdamState], None] | None = None,
    optimizer: AdamState | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Epochs of shuffled minibatches until ``cfg.epochs`` or ``cfg.max_steps`` is reached.

    ``checkpoint_sink(step, model, optimizer)`` is called every
    ``cfg.checkpoint_every`` steps and once at the end; an exception raised by
    it stops training.
    """
    data = np.asarray(dataset)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    dtype = model.params[next(iter(model.params))].dtype
    data = data.astype(dtype, copy=False)
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer or AdamState.zeros_like(model.params)
    history: list[LossBreakdown] = []
    step = start_step
    n = data.shape[0]
    bs = min(cfg.batch_size, n)
    epoch = 0
    while True:
        if cfg.max_steps is None and epoch >= cfg.epochs:
            break
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = data[order[start : start + bs]]
            grads, parts = training_step(model, batch, rng, sched, cfg, step)
            adam_update(model.params, named_gradients(model.params, grads, cfg.clip_grad), opt, cfg)
            history.append(parts)
            step += 1
            if cfg.log_every and step % cfg.log_every == 0:
                log.info(parts.log_line(step))
            if checkpoint_sink is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint_sink(step, model, opt)
        epoch += 1
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if checkpoint_sink is not None:
        checkpoint_sink(step, model, opt)
    return TrainResult(model, opt, history, step)


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
