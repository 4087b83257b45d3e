"""LIF neurons, synaptic currents, tdBN and the direct encoder / averaging decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as tc
from .tensor import NormStats, Tensor


@dataclass(frozen=True)
class NeuronConfig:
    v_threshold: float = 1.0
    tau_decay: float = 0.8
    surrogate_width: float = 1.0
    num_steps: int = 4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if not self.v_threshold > 0:
            raise ValueError(f"v_threshold must be > 0, got {self.v_threshold}")
        if not 0 <= self.tau_decay < 1:
            raise ValueError(f"tau_decay must lie in [0, 1), got {self.tau_decay}")
        if not self.surrogate_width > 0:
            raise ValueError(f"surrogate_width must be > 0, got {self.surrogate_width}")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ValueError(f"num_steps must be an integer >= 1, got {self.num_steps}")


@dataclass
class LifState:
    """Membrane potentials and last emitted spikes of a layer of LIF neurons."""

    membrane: Tensor
    last_spike: np.ndarray

    @classmethod
    def rest(cls, shape, dtype=None) -> "LifState":
        dt = dtype or tc.default_dtype()
        return cls(tc.Tensor(np.zeros(shape, dtype=dt)), np.zeros(shape, dtype=dt))


@dataclass
class SignalTensor:
    """Per-pixel time series, layout (batch, H, W, C, S).

    ``kind`` is ``"current"`` for real-valued synaptic currents and ``"spike"``
    for binary spike trains.
    """

    values: np.ndarray
    kind: Literal["current", "spike"] = "current"

    def __post_init__(self):
        if self.kind not in ("current", "spike"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.kind == "spike" and not np.isin(self.values, (0, 1)).all():
            raise ValueError("spike signals must be binary")

    @property
    def num_steps(self) -> int:
        return self.values.shape[-1]

    def to_folded(self) -> np.ndarray:
        """(B, H, W, C, S) -> time-major folded (S*B, H, W, C)."""
        b, h, w, c, s = self.values.shape
        return np.ascontiguousarray(self.values.transpose(4, 0, 1, 2, 3)).reshape(s * b, h, w, c)

    @classmethod
    def from_folded(cls, x: np.ndarray, num_steps: int, kind="current") -> "SignalTensor":
        sb, h, w, c = x.shape
        return cls(np.ascontiguousarray(x.reshape(num_steps, sb // num_steps, h, w, c).transpose(1, 2, 3, 4, 0)), kind)


def lif_step(state: LifState, input_current: Tensor, cfg: NeuronConfig) -> tuple[LifState, Tensor]:
    """One iterative-LIF update with hard reset to zero.

    u = tau * u_prev * (1 - o_prev) + I;  o = [u >= v_th]

    The reset factor enters as a constant, so no gradient flows through it.
    """
    if state.membrane.shape != input_current.shape:
        raise tc.ShapeError(f"lif_step: state {state.membrane.shape} vs input {input_current.shape}")
    keep = (cfg.tau_decay * (1.0 - state.last_spike)).astype(input_current.dtype)
    u = tc.add(tc.scale(state.membrane, keep), input_current)
    o = tc.spike(u, cfg.v_threshold, cfg.surrogate_width)
    return LifState(u, o.data), o


def lif(currents: Tensor, cfg: NeuronConfig, num_steps: int | None = None) -> Tensor:
    """Run LIF neurons over a time-major folded input (S*B, ...); returns spikes of the same shape."""
    s = num_steps or cfg.num_steps
    if s == 1:
        return lif_step(LifState.rest(currents.shape, currents.dtype), currents, cfg)[1]
    steps = tc.split(currents, s, axis=0)
    state = LifState.rest(steps[0].shape, currents.dtype)
    spikes = []
    for cur in steps:
        state, o = lif_step(state, cur, cfg)
        spikes.append(o)
    return tc.concat(spikes, axis=0)


def surrogate_grad(u, cfg: NeuronConfig) -> np.ndarray:
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    if u.dtype.kind != "f":
        u = u.astype(np.float64)
    return tc.surrogate_derivative(u, cfg.v_threshold, cfg.surrogate_width)


def synaptic_current(spikes: SignalTensor, weight, bias=None, padding: int = 0) -> SignalTensor:
    """Weighted spike sums, applied independently at every SNN time step.

    A 2-d ``weight`` (out, in) acts as a dense layer over the channel axis, a
    4-d one (out, in, kh, kw) as a convolution.
    """
    if spikes.kind != "spike":
        raise ValueError("synaptic_current expects spike trains, got currents")
    w = np.asarray(weight)
    s = spikes.num_steps
    x = spikes.values.astype(w.dtype if w.dtype.kind == "f" else tc.default_dtype())
    with tc.no_tape():
        if w.ndim == 2:
            out = tc.linear(tc.Tensor(np.moveaxis(x, -1, 0)), tc.Tensor(w), None if bias is None else tc.Tensor(np.asarray(bias)))
            return SignalTensor(np.moveaxis(out.data, 0, -1), "current")
        folded = SignalTensor(x, "current").to_folded()
        out = tc.conv2d(
            tc.Tensor(folded), tc.Tensor(w), None if bias is None else tc.Tensor(np.asarray(bias)), padding=padding
        )
    return SignalTensor.from_folded(out.data, s, "current")


def tdbn(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: NormStats | None,
    cfg: NeuronConfig,
    mode: Literal["train", "eval"] = "train",
) -> Tensor:
    """tdBN over a time-major folded tensor: per channel, joint statistics over batch, space and time."""
    return tc.tdbn(x, gamma, beta, stats, cfg.v_threshold, cfg.bn_eps, training=(mode == "train"))


def encode_direct(x: np.ndarray, num_steps: int) -> SignalTensor:
    """Direct encoding: repeat each pixel value along a new trailing time axis.

    Accepts a single (H, W, C) image or a (B, H, W, C) batch.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return SignalTensor(np.repeat(x[..., None], num_steps, axis=-1), "current")


def decode_average(sig: SignalTensor | np.ndarray) -> np.ndarray:
    """Average over the time axis, (B, H, W, C, S) -> (B, H, W, C)."""
    values = sig.values if isinstance(sig, SignalTensor) else np.asarray(sig)
    return values.mean(axis=-1)


def encode_folded(x: Tensor, num_steps: int) -> Tensor:
    """Differentiable direct encoding, (B, H, W, C) -> (S*B, H, W, C)."""
    b = x.shape[0]
    rep = tc.broadcast(tc.reshape(x, (1,) + x.shape), (num_steps,) + x.shape)
    return tc.reshape(rep, (num_steps * b,) + x.shape[1:])


def decode_folded(y: Tensor, num_steps: int) -> Tensor:
    """Differentiable time average, (S*B, H, W, C) -> (B, H, W, C)."""
    sb = y.shape[0]
    return tc.mean(tc.reshape(y, (num_steps, sb // num_steps) + y.shape[1:]), axis=0)
