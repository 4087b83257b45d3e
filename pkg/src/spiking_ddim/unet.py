"""Spiking UNet: currents in, currents out, spikes everywhere in between.

Layer order inside a ResBlock (kept identical for the fused sampler)::

    h (spikes) -> conv3x3 -> tdBN -> + time projection -> LIF -> s1
    s1        -> conv3x3 -> tdBN -> + shortcut(h)      -> LIF -> out

The shortcut is the identity when the channel count is unchanged and a 1x1
conv otherwise. Downsampling is avgpool2x2 followed by a 1x1 conv, upsampling
is nearest 2x followed by a 3x3 conv; both are followed by tdBN and LIF. The
last conv is 1x1 over the concatenated outputs of every top-resolution
ResBlock and has no neuron after it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from . import tensor as tc
from .snn import NeuronConfig, SignalTensor, lif
from .tensor import NormStats, Tensor


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 16
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    time_embed_dim: int = 64
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ValueError("need at least one resolution level")
        if self.image_size % (2 ** (levels - 1)):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{levels - 1}")
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.num_res_blocks < 1 or self.base_channels < 1:
            raise ValueError("num_res_blocks and base_channels must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def top_channels(self) -> int:
        """Channel count of the spike trains entering the final conv."""
        return (2 * self.num_res_blocks + 1) * self.base_channels

    @classmethod
    def full_scale(cls, image_size: int = 32, in_channels: int = 3, num_steps: int = 4) -> "UNetConfig":
        return cls(
            image_size=image_size,
            in_channels=in_channels,
            out_channels=in_channels,
            base_channels=128,
            channel_multipliers=(1, 2, 3, 4),
            num_res_blocks=2,
            time_embed_dim=512,
            neuron=NeuronConfig(num_steps=num_steps),
        )


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Half sines, half cosines over geometric frequencies; (len(t), dim)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _layer_specs(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, role) for every trainable tensor, in initialization order."""
    specs: list[tuple[str, tuple[int, ...], str]] = []
    e = cfg.time_embed_dim

    def conv(name, cin, cout, k, bias=True):
        specs.append((f"{name}.w", (cout, cin, k, k), "weight"))
        if bias:
            specs.append((f"{name}.b", (cout,), "bias"))

    def dense(name, cin, cout):
        specs.append((f"{name}.w", (cout, cin), "weight"))
        specs.append((f"{name}.b", (cout,), "bias"))

    def norm(name, c):
        specs.append((f"{name}.gamma", (c,), "gamma"))
        specs.append((f"{name}.beta", (c,), "beta"))

    def res(name, cin, cout):
        conv(f"{name}.conv1", cin, cout, 3)
        norm(f"{name}.bn1", cout)
        dense(f"{name}.temb", e, cout)
        conv(f"{name}.conv2", cout, cout, 3)
        norm(f"{name}.bn2", cout)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, 1)

    dense("time.fc1", e, e)
    norm("time.bn1", e)
    dense("time.fc2", e, e)
    norm("time.bn2", e)

    chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
    c0 = cfg.base_channels
    conv("conv_in", cfg.in_channels, c0, 3)
    norm("conv_in.bn", c0)
    ch = c0
    for i, c in enumerate(chans):
        for r in range(cfg.num_res_blocks):
            res(f"down{i}.res{r}", ch, c)
            ch = c
        if i < cfg.levels - 1:
            conv(f"down{i}.pool", ch, ch, 1)
            norm(f"down{i}.pool.bn", ch)
        else:
            conv(f"down{i}.conv", ch, ch, 3)
            norm(f"down{i}.conv.bn", ch)
    for i in reversed(range(cfg.levels)):
        c = chans[i]
        for r in range(cfg.num_res_blocks):
            res(f"up{i}.res{r}", ch + c, c)
            ch = c
        if i > 0:
            conv(f"up{i}.upsample", ch, ch, 3)
            norm(f"up{i}.upsample.bn", ch)
        else:
            conv(f"up{i}.conv", ch, ch, 3)
            norm(f"up{i}.conv.bn", ch)
    res("final.res", ch, c0)
    conv("conv_out", cfg.top_channels, cfg.out_channels, 1)
    return specs


def count_parameters(cfg: UNetConfig) -> int:
    """Trainable scalar count, computed from shapes alone (no allocation)."""
    return int(sum(np.prod(shape) for _, shape, _ in _layer_specs(cfg)))


class Probe(Protocol):
    """Observer of the forward pass used for kind tracing and operation counting."""

    def synapse(self, name: str, x: np.ndarray, weight_shape: tuple, stride: int, padding: int,
                out_shape: tuple, has_bias: bool, source: np.ndarray) -> None: ...

    def elementwise(self, name: str, op: str, count: int) -> None: ...


@dataclass
class SpikingUNet:
    """Parameters, tdBN running statistics and config of one Spiking UNet."""

    cfg: UNetConfig
    params: dict[str, Tensor]
    stats: dict[str, NormStats]
    probe: Probe | None = None

    # -- construction ----------------------------------------------------

    @property
    def num_steps(self) -> int:
        return self.cfg.neuron.num_steps

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def with_neuron(self, **changes) -> "SpikingUNet":
        """Same weights, different neuron settings (e.g. another S for op counting)."""
        cfg = replace(self.cfg, neuron=replace(self.cfg.neuron, **changes))
        return SpikingUNet(cfg, self.params, self.stats, self.probe)

    # -- layers ------------------------------------------------------------

    def _conv(self, name, x: Tensor, k: int, stride=1, padding=None, source=None) -> Tensor:
        w = self.params[f"{name}.w"]
        b = self.params.get(f"{name}.b")
        pad = (k // 2) if padding is None else padding
        out = tc.conv2d(x, w, b, stride=stride, padding=pad)
        if self.probe is not None:
            self.probe.synapse(name, x.data, w.shape, stride, pad, out.shape, b is not None,
                               x.data if source is None else source)
        return out

    def _dense(self, name, x: Tensor) -> Tensor:
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        out = tc.linear(x, w, b)
        if self.probe is not None:
            self.probe.synapse(name, x.data, w.shape, 1, 0, out.shape, True, x.data)
        return out

    def _norm(self, name, x: Tensor, training: bool) -> Tensor:
        n = self.cfg.neuron
        if name not in self.stats:
            self.stats[name] = NormStats.fresh(x.shape[1], n.bn_momentum)
        out = tc.tdbn(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.stats[name],
                      n.v_threshold, n.bn_eps, training)
        if self.probe is not None:
            self.probe.elementwise(name, "tdbn", x.data.size)
        return out

    def _lif(self, name, x: Tensor) -> Tensor:
        if self.probe is not None:
            self.probe.elementwise(name, "lif", x.data.size)
        return lif(x, self.cfg.neuron, self.num_steps)

    def _add(self, name, a: Tensor, b: Tensor) -> Tensor:
        out = tc.add(a, b)
        if self.probe is not None:
            self.probe.elementwise(name, "add", out.data.size)
        return out

    def _res(self, name, h: Tensor, temb: Tensor, training: bool) -> Tensor:
        c1 = self._norm(f"{name}.bn1", self._conv(f"{name}.conv1", h, 3), training)
        proj = self._dense(f"{name}.temb", temb)
        c1 = self._add(f"{name}.temb_add", c1, tc.reshape(proj, (proj.shape[0], 1, 1, proj.shape[1])))
        s1 = self._lif(f"{name}.lif1", c1)
        c2 = self._norm(f"{name}.bn2", self._conv(f"{name}.conv2", s1, 3), training)
        short = self._conv(f"{name}.skip", h, 1) if f"{name}.skip.w" in self.params else h
        return self._lif(f"{name}.lif2", self._add(f"{name}.residual", c2, short))

    def time_embedding(self, t, batch: int, training: bool) -> Tensor:
        """Spiking time embedding, (S*B, E) spikes."""
        e = self.cfg.time_embed_dim
        s = self.num_steps
        t = np.broadcast_to(np.asarray(t), (batch,))
        emb = sinusoidal_embedding(t, e).astype(self.params["time.fc1.w"].dtype)
        x = tc.Tensor(np.tile(emb, (s, 1)))
        h = self._lif("time.lif1", self._norm("time.bn1", self._dense("time.fc1", x), training))
        return self._lif("time.lif2", self._norm("time.bn2", self._dense("time.fc2", h), training))

    # -- forward -----------------------------------------------------------

    def first_current(self, x: Tensor) -> Tensor:
        """The only layer fed real-valued input currents."""
        return self._conv("conv_in", x, 3)

    def body(self, first: Tensor, t, training: bool = False) -> Tensor:
        """From the first-layer current to the spike trains entering the last conv."""
        cfg = self.cfg
        batch = first.shape[0] // self.num_steps
        temb = self.time_embedding(t, batch, training)
        h = self._lif("conv_in.lif", self._norm("conv_in.bn", first, training))
        skips, top = [], []
        for i in range(cfg.levels):
            for r in range(cfg.num_res_blocks):
                h = self._res(f"down{i}.res{r}", h, temb, training)
                skips.append(h)
                if i == 0:
                    top.append(h)
            if i < cfg.levels - 1:
                pooled = tc.avgpool2x2(h)
                c = self._conv(f"down{i}.pool", pooled, 1, source=h.data)
                h = self._lif(f"down{i}.pool.lif", self._norm(f"down{i}.pool.bn", c, training))
            else:
                c = self._conv(f"down{i}.conv", h, 3)
                h = self._lif(f"down{i}.conv.lif", self._norm(f"down{i}.conv.bn", c, training))
        for i in reversed(range(cfg.levels)):
            for r in range(cfg.num_res_blocks):
                h = self._res(f"up{i}.res{r}", tc.concat([h, skips.pop()], axis=-1), temb, training)
                if i == 0:
                    top.append(h)
            if i > 0:
                c = self._conv(f"up{i}.upsample", tc.upsample2x(h), 3)
                h = self._lif(f"up{i}.upsample.lif", self._norm(f"up{i}.upsample.bn", c, training))
            else:
                c = self._conv(f"up{i}.conv", h, 3)
                h = self._lif(f"up{i}.conv.lif", self._norm(f"up{i}.conv.bn", c, training))
        top.append(self._res("final.res", h, temb, training))
        return tc.concat(top, axis=-1)

    def head(self, spikes: Tensor) -> Tensor:
        """Last conv: spikes -> output synaptic currents (affine, no neuron)."""
        return self._conv("conv_out", spikes, 1)

    def __call__(self, x: Tensor, t, training: bool = False) -> Tensor:
        """Folded currents (S*B, H, W, C) -> folded currents of the same shape."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[3] != cfg.in_channels or x.shape[1:3] != (cfg.image_size,) * 2:
            raise tc.ShapeError(
                f"unet: expected (S*B, {cfg.image_size}, {cfg.image_size}, {cfg.in_channels}), got {x.shape}"
            )
        if x.shape[0] % self.num_steps:
            raise tc.ShapeError(f"unet: leading axis {x.shape[0]} not a multiple of S={self.num_steps}")
        return self.head(self.body(self.first_current(x), t, training))


def build_unet(cfg: UNetConfig, seed: int = 0) -> SpikingUNet:
    """Fan-in uniform init for convs and linears, tdBN gamma=1 beta=0, zero last conv."""
    rng = np.random.default_rng(seed)
    dt = tc.default_dtype()
    params: dict[str, Tensor] = {}
    specs = _layer_specs(cfg)
    fan_in = {}
    for name, shape, role in specs:
        if role == "weight":
            fan_in[name.rsplit(".", 1)[0]] = int(np.prod(shape[1:]))
    for name, shape, role in specs:
        layer = name.rsplit(".", 1)[0]
        if layer.startswith("conv_out"):
            arr = np.zeros(shape)
        elif role in ("weight", "bias"):
            bound = 1.0 / math.sqrt(fan_in[layer])
            arr = rng.uniform(-bound, bound, size=shape)
        elif role == "gamma":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
    stats = {
        name[: -len(".gamma")]: NormStats.fresh(shape[0], cfg.neuron.bn_momentum)
        for name, shape, role in specs
        if role == "gamma"
    }
    return SpikingUNet(cfg, params, stats)


def unet_forward(model: SpikingUNet, x_signal: SignalTensor, t) -> SignalTensor:
    """Inference on a (B, H, W, C, S) current signal; returns output currents of the same shape."""
    if x_signal.kind != "current":
        raise ValueError("unet input must be synaptic currents")
    if x_signal.num_steps != model.num_steps:
        raise tc.ShapeError(f"unet: signal has S={x_signal.num_steps}, model expects {model.num_steps}")
    dt = model.params["conv_in.w"].dtype
    with tc.no_tape():
        out = model(tc.Tensor(x_signal.to_folded().astype(dt)), t, training=False)
    return SignalTensor.from_folded(out.data, model.num_steps, "current")


class KindTrace:
    """Records whether each synaptic layer received binary spikes or real currents."""

    def __init__(self):
        self.kinds: dict[str, str] = {}

    def synapse(self, name, x, weight_shape, stride, padding, out_shape, has_bias, source):
        binary = bool(np.isin(source, (0.0, 1.0)).all())
        self.kinds[name] = "spike" if binary else "current"

    def elementwise(self, name, op, count):
        pass
