"""DDIM generation in image space, in signal space, and with fused spike-train IO.

The fused pipeline rests on a simple expansion. Write x'_k for the signal at
the k-th sampling step, s_k for the spike trains entering the last conv L at
that step, and (a_k, b_k) for the step coefficients. Then

    x'_k = P_k enc(x_T) + sum_{j<k} c_jk (L*s_j + bias_L)

with P_k the product of the earlier a's and c_jk = b_j times the a's in
between. The first conv K of step k is therefore one conv over the channel
concatenation [enc(x_T), ones, s_1, ..., s_{k-1}] with kernels
P_k K, (sum c_jk) K bias_L and c_jk (K o L). The ones plane carries the last
conv's bias so that zero padding at the image border stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as tc
from .schedule import NoiseSchedule, ddim_coefficients
from .snn import SignalTensor, decode_folded, encode_folded
from .tensor import Tensor

Pipeline = Literal["reference", "signal", "fused"]


class FusionError(RuntimeError):
    """The fused pipeline drifted from its unfused counterpart or cannot be built."""


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 10
    seed: int = 0
    pipeline: Pipeline = "signal"
    batch: int = 16
    check_binary: bool = True

    def __post_init__(self):
        if self.pipeline not in ("reference", "signal", "fused"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.num_inference_steps < 1 or self.batch < 1:
            raise ValueError("num_inference_steps and batch must be >= 1")

    def steps(self, sched: NoiseSchedule) -> list[tuple[int, int]]:
        """(t, t_prev) pairs from T down to 0."""
        ts = [int(t) for t in sched.inference_steps(self.num_inference_steps)]
        return list(zip(ts, ts[1:] + [0]))


def initial_noise(shape, seed: int, dtype=None) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype or tc.default_dtype())


def _image_shape(model, batch: int) -> tuple[int, ...]:
    c = model.cfg
    return (batch, c.image_size, c.image_size, c.in_channels)


def _dtype(model):
    params = getattr(model, "params", None)
    return next(iter(params.values())).dtype if params else tc.default_dtype()


def _seed(model, cfg: SamplerConfig, x_T):
    if x_T is None:
        return initial_noise(_image_shape(model, cfg.batch), cfg.seed, _dtype(model))
    return np.asarray(x_T)


def _net(model, x_folded: np.ndarray, t: int, batch: int) -> np.ndarray:
    with tc.no_tape():
        return model(Tensor(x_folded), np.full(batch, t), training=False).data


def sample_reference(model, sched: NoiseSchedule, cfg: SamplerConfig, x_T=None) -> np.ndarray:
    """Image-space DDIM: encode, run the network, decode, combine, every step."""
    x = _seed(model, cfg, x_T)
    s, b = model.num_steps, x.shape[0]
    for t, t_prev in cfg.steps(sched):
        a_t, b_t = ddim_coefficients(t, sched, t_prev)
        with tc.no_tape():
            y = _net(model, encode_folded(Tensor(x), s).data, t, b)
            v = decode_folded(Tensor(y), s).data
        x = (a_t * x + b_t * v).astype(x.dtype, copy=False)
    return x


def sample_signal_space(model, sched: NoiseSchedule, cfg: SamplerConfig, x_T=None) -> np.ndarray:
    """Signal-space DDIM: the combination acts on current time series; decode once at the end."""
    x = _seed(model, cfg, x_T)
    s, b = model.num_steps, x.shape[0]
    with tc.no_tape():
        sig = encode_folded(Tensor(x), s).data
    for t, t_prev in cfg.steps(sched):
        a_t, b_t = ddim_coefficients(t, sched, t_prev)
        sig = (a_t * sig + b_t * _net(model, sig, t, b)).astype(x.dtype, copy=False)
    with tc.no_tape():
        return decode_folded(Tensor(sig), s).data


@dataclass
class FusedStepConv:
    """One 3x3 conv that yields the first-layer current of a sampling step from spike trains.

    Input channels, in order: the encoded seed, a ones plane, then the
    last-hidden-layer spike trains of every earlier step.
    """

    weight: np.ndarray  # (C0, C_in_total, kh, kw)
    bias: np.ndarray
    seed_scale: float
    history_scales: list[float] = field(default_factory=list)
    layout: list[tuple[str, int]] = field(default_factory=list)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def apply(self, seed_signal: np.ndarray, spikes: list[np.ndarray]) -> np.ndarray:
        ones = np.ones(seed_signal.shape[:3] + (1,), dtype=seed_signal.dtype)
        x = np.concatenate([seed_signal, ones, *spikes], axis=-1)
        if x.shape[-1] != self.in_channels:
            raise tc.ShapeError(f"fused conv expects {self.in_channels} channels, got {x.shape[-1]}")
        with tc.no_tape():
            pad = self.weight.shape[-1] // 2
            return tc.conv2d(Tensor(x), Tensor(self.weight), Tensor(self.bias), padding=pad).data


def compose_kernels(first_w: np.ndarray, last_w: np.ndarray) -> np.ndarray:
    """Kernel of ConvFirst o ConvLast when ConvLast is 1x1: (C0, Cin, k, k) x (Cin, M, 1, 1) -> (C0, M, k, k)."""
    if last_w.shape[2:] != (1, 1):
        raise FusionError(f"last conv must be 1x1 to fuse, got kernel {last_w.shape[2:]}")
    if first_w.shape[1] != last_w.shape[0]:
        raise FusionError(f"channel mismatch: first conv takes {first_w.shape[1]}, last conv emits {last_w.shape[0]}")
    return np.einsum("oihw,im->omhw", first_w, last_w[:, :, 0, 0])


def _boundary(model):
    p = model.params
    for key in ("conv_in.w", "conv_in.b", "conv_out.w", "conv_out.b"):
        if key not in p:
            raise FusionError(f"model has no affine boundary layer {key!r}")
    return p["conv_in.w"].data, p["conv_in.b"].data, p["conv_out.w"].data, p["conv_out.b"].data


def _combination(steps, sched: NoiseSchedule) -> tuple[float, list[float]]:
    """Seed factor and per-step output factors after running ``steps``."""
    coef = [ddim_coefficients(t, sched, tp) for t, tp in steps]
    a = np.array([ak for ak, _ in coef] + [1.0])
    seed = float(np.prod(a[:-1]))
    return seed, [bj * float(np.prod(a[j + 1 : -1])) for j, (_, bj) in enumerate(coef)]


def fuse_step_conv(model, k: int, steps: list[tuple[int, int]], sched: NoiseSchedule) -> FusedStepConv:
    """Fused conv for the k-th sampling step (0-based) of the ``steps`` sequence."""
    if not 0 <= k < len(steps):
        raise ValueError(f"step index {k} outside 0..{len(steps) - 1}")
    K, c_in, L, b_L = _boundary(model)
    seed_scale, hist = _combination(steps[:k], sched)
    KL = compose_kernels(K, L)
    bias_kernel = np.einsum("oihw,i->ohw", K, b_L)[:, None]
    blocks = [seed_scale * K, sum(hist) * bias_kernel] + [c * KL for c in hist]
    layout = [("seed", K.shape[1]), ("ones", 1)] + [(f"spikes{j}", L.shape[1]) for j in range(k)]
    w = np.concatenate(blocks, axis=1).astype(K.dtype)
    return FusedStepConv(w, c_in.copy(), seed_scale, hist, layout)


def sample_fused(model, sched: NoiseSchedule, cfg: SamplerConfig, x_T=None,
                 return_trace: bool = False, fused: list[FusedStepConv] | None = None):
    """Generation where only spike trains cross sampling-step boundaries.

    Each step's first-layer current comes from its fused conv over the encoded
    seed and the stored spike trains; the output image is read out once after
    the last step as P enc(x_T) + sum_j c_j (L*s_j + bias_L), then decoded.
    ``fused`` may hold precomputed convs for the same step sequence.
    """
    x = _seed(model, cfg, x_T)
    s, b = model.num_steps, x.shape[0]
    steps = cfg.steps(sched)
    if fused is not None and len(fused) != len(steps):
        raise FusionError(f"{len(fused)} precomputed fused convs for {len(steps)} sampling steps")
    with tc.no_tape():
        seed_sig = encode_folded(Tensor(x), s).data
    spikes: list[np.ndarray] = []
    for k, (t, _) in enumerate(steps):
        conv = fused[k] if fused is not None else fuse_step_conv(model, k, steps, sched)
        first = conv.apply(seed_sig, spikes)
        with tc.no_tape():
            out = model.body(Tensor(first), np.full(b, t), training=False).data
        if cfg.check_binary and not np.isin(out, (0, 1)).all():
            raise FusionError(f"step t={t}: inter-step state is not binary")
        spikes.append(out.astype(x.dtype, copy=False))
    P, c = _combination(steps, sched)
    _, _, L, b_L = _boundary(model)
    sig = P * seed_sig + sum(c) * b_L
    with tc.no_tape():
        for cj, sj in zip(c, spikes):
            sig = sig + cj * tc.conv2d(Tensor(sj), Tensor(L), None).data
        img = decode_folded(Tensor(sig.astype(x.dtype, copy=False)), s).data
    if return_trace:
        return img, [SignalTensor.from_folded(sp, s, "spike") for sp in spikes]
    return img


SAMPLERS = {"reference": sample_reference, "signal": sample_signal_space, "fused": sample_fused}


def fuse_all(model, sched: NoiseSchedule, cfg: SamplerConfig) -> list[FusedStepConv]:
    steps = cfg.steps(sched)
    return [fuse_step_conv(model, k, steps, sched) for k in range(len(steps))]


def generate(model, sched: NoiseSchedule, cfg: SamplerConfig, x_T=None, fused=None) -> np.ndarray:
    if cfg.pipeline == "fused":
        return sample_fused(model, sched, cfg, x_T, fused=fused)
    return SAMPLERS[cfg.pipeline](model, sched, cfg, x_T)


def generate_many(model, sched: NoiseSchedule, count: int, cfg: SamplerConfig, fused=None) -> np.ndarray:
    """``count`` images in chunks of ``cfg.batch``; chunk i uses seed ``cfg.seed + i``."""
    out = []
    for i, start in enumerate(range(0, count, cfg.batch)):
        n = min(cfg.batch, count - start)
        x_T = initial_noise(_image_shape(model, n), cfg.seed + i, _dtype(model))
        out.append(generate(model, sched, cfg, x_T, fused))
    return np.concatenate(out, axis=0)


def check_fusion(model, sched: NoiseSchedule, cfg: SamplerConfig, x_T=None, tol: float = 1e-4) -> float:
    """Max abs image difference between the fused and signal-space pipelines; raises beyond ``tol``."""
    x = _seed(model, cfg, x_T)
    diff = float(np.max(np.abs(sample_fused(model, sched, cfg, x) - sample_signal_space(model, sched, cfg, x))))
    if not diff <= tol:
        raise FusionError(f"fusion-consistency failure: fused and signal-space images differ by {diff:.3g} > {tol}")
    return diff
