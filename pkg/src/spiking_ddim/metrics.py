"""Fréchet autoencoder distance at desk scale, and dynamic addition/multiplication counts."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .schedule import NoiseSchedule, ddim_coefficients
from .snn import encode_folded
from .tensor import Tensor
from .train import AdamState, TrainConfig, adam_update, named_gradients

# -- autoencoder ---------------------------------------------------------------

ENCODER_CHANNELS = (16, 32, 64)


@dataclass
class Autoencoder:
    """Three stride-2 convs to a dense latent, mirrored by upsample+conv."""

    params: dict[str, Tensor]
    image_size: int
    channels: int
    latent_dim: int

    def encode(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(ENCODER_CHANNELS)):
            h = tc.relu(tc.conv2d(h, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"], stride=2, padding=1))
        h = tc.reshape(h, (h.shape[0], -1))
        return tc.linear(h, self.params["enc_fc.w"], self.params["enc_fc.b"])

    def decode(self, z: Tensor) -> Tensor:
        side = self.image_size // 2 ** len(ENCODER_CHANNELS)
        h = tc.relu(tc.linear(z, self.params["dec_fc.w"], self.params["dec_fc.b"]))
        h = tc.reshape(h, (z.shape[0], side, side, ENCODER_CHANNELS[-1]))
        for i in range(len(ENCODER_CHANNELS)):
            h = tc.conv2d(tc.upsample2x(h), self.params[f"dec{i}.w"], self.params[f"dec{i}.b"], padding=1)
            if i < len(ENCODER_CHANNELS) - 1:
                h = tc.relu(h)
        return h

    def latents(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        dt = self.params["enc_fc.w"].dtype
        with tc.no_tape():
            for i in range(0, len(images), batch):
                out.append(self.encode(Tensor(np.asarray(images[i : i + batch], dtype=dt))).data)
        return np.concatenate(out).astype(np.float64)

    def reconstruction_mse(self, images: np.ndarray) -> float:
        dt = self.params["enc_fc.w"].dtype
        with tc.no_tape():
            x = Tensor(np.asarray(images, dtype=dt))
            return float(np.mean((self.decode(self.encode(x)).data - x.data) ** 2))


def init_autoencoder(image_size: int, channels: int, latent_dim: int, seed: int) -> Autoencoder:
    down = 2 ** len(ENCODER_CHANNELS)
    if image_size % down:
        raise ValueError(f"autoencoder needs image size divisible by {down}, got {image_size}")
    rng = np.random.default_rng(seed)
    dt = tc.default_dtype()
    shapes = {}
    cin = channels
    for i, c in enumerate(ENCODER_CHANNELS):
        shapes[f"enc{i}"] = (c, cin, 3, 3)
        cin = c
    flat = (image_size // down) ** 2 * ENCODER_CHANNELS[-1]
    shapes["enc_fc"] = (latent_dim, flat)
    shapes["dec_fc"] = (flat, latent_dim)
    outs = list(reversed(ENCODER_CHANNELS[:-1])) + [channels]
    cin = ENCODER_CHANNELS[-1]
    for i, c in enumerate(outs):
        shapes[f"dec{i}"] = (c, cin, 3, 3)
        cin = c
    params = {}
    for name, shape in shapes.items():
        bound = 1.0 / math.sqrt(int(np.prod(shape[1:])))
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, shape).astype(dt), requires_grad=True, name=name)
        params[f"{name}.b"] = Tensor(np.zeros(shape[0], dtype=dt), requires_grad=True, name=name)
    return Autoencoder(params, image_size, channels, latent_dim)


def train_autoencoder(dataset: np.ndarray, latent_dim: int = 128, seed: int = 0, epochs: int = 30,
                      batch: int = 64, lr: float = 1e-3) -> Autoencoder:
    """Reconstruction training with Adam; the encoder half is what FAD uses."""
    data = np.asarray(dataset)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    ae = init_autoencoder(data.shape[1], data.shape[3], latent_dim, seed)
    data = data.astype(ae.params["enc_fc.w"].dtype)
    cfg = TrainConfig(lr=lr, batch_size=batch)
    opt = AdamState.zeros_like(ae.params)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch):
            x = Tensor(data[order[start : start + batch]])
            with tc.GradTape() as tape:
                diff = tc.add(ae.decode(ae.encode(x)), tc.scale(x, -1.0))
                loss = tc.mean(tc.mul(diff, diff))
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"autoencoder diverged at epoch {epoch}: loss={float(loss.data)}")
            adam_update(ae.params, named_gradients(ae.params, tape.backward(loss)), opt, cfg)
    return ae


# -- Fréchet distance ------------------------------------------------------------

NEG_EIG_TOL = -1e-8
RIDGE = 1e-6


@dataclass(frozen=True)
class FadStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m, c = np.asarray(self.mean), np.asarray(self.cov)
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance {c.shape} does not match mean of size {m.size}")
        if not np.allclose(c, c.T, atol=1e-10 * max(1.0, float(np.abs(c).max(initial=0)))):
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return int(np.asarray(self.mean).size)

    @classmethod
    def fit(cls, latents: np.ndarray) -> "FadStats":
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise ValueError(f"expected (n, d) latents with n >= 1, got {z.shape}")
        n, d = z.shape
        cov = np.cov(z, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
        cov = (cov + cov.T) / 2
        if n < d + 1 or np.linalg.matrix_rank(cov) < d:
            warnings.warn(f"degenerate latent covariance (n={n}, d={d}); adding ridge {RIDGE}", RuntimeWarning,
                          stacklevel=2)
            cov = cov + RIDGE * np.eye(d)
        return cls(z.mean(axis=0), cov)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    if w.min(initial=0) < NEG_EIG_TOL * max(1.0, float(np.abs(w).max(initial=0))):
        warnings.warn(f"matrix not PSD (min eigenvalue {w.min():.3g}); clipping", RuntimeWarning, stacklevel=3)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FadStats, b: FadStats) -> float:
    """Squared Fréchet distance between two Gaussians.

    tr((Sa Sb)^1/2) is taken as tr((Sa^1/2 Sb Sa^1/2)^1/2), which has the same
    eigenvalues and keeps everything symmetric.
    """
    if a.dim != b.dim:
        raise ValueError(f"latent dimension mismatch: {a.dim} vs {b.dim}")
    ca, cb = np.asarray(a.cov, np.float64), np.asarray(b.cov, np.float64)
    ra = _psd_sqrt(ca)
    mid = ra @ cb @ ra
    w = np.linalg.eigvalsh((mid + mid.T) / 2)
    cross = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    delta = np.asarray(a.mean, np.float64) - np.asarray(b.mean, np.float64)
    d2 = float(delta @ delta + np.trace(ca) + np.trace(cb) - 2 * cross)
    return max(d2, 0.0)


def compute_fad(encoder: Autoencoder, real: np.ndarray, generated: np.ndarray) -> float:
    if len(real) == 0 or len(generated) == 0:
        raise ValueError("FAD needs non-empty image sets")
    return frechet_distance(FadStats.fit(encoder.latents(real)), FadStats.fit(encoder.latents(generated)))


# -- operation counting ------------------------------------------------------------


@dataclass
class OpCountReport:
    """Counts per image; ``breakdown`` maps layer -> [additions, multiplications]."""

    additions: int
    multiplications: int
    breakdown: dict[str, list[int]]
    scope: str
    mode: str
    num_steps: int
    images: int = 1

    def __post_init__(self):
        adds = sum(v[0] for v in self.breakdown.values())
        muls = sum(v[1] for v in self.breakdown.values())
        if (adds, muls) != (self.additions, self.multiplications):
            raise ValueError("report totals differ from the breakdown sums")

    def table(self) -> str:
        width = max([len("layer")] + [len(k) for k in self.breakdown])
        lines = [f"{'layer':<{width}}  {'additions':>16}  {'multiplications':>16}"]
        for name, (a, m) in self.breakdown.items():
            lines.append(f"{name:<{width}}  {a:>16d}  {m:>16d}")
        lines.append(f"{'total':<{width}}  {self.additions:>16d}  {self.multiplications:>16d}")
        return "\n".join(lines)

    def key_values(self) -> str:
        return (f"scope={self.scope} mode={self.mode} S={self.num_steps} images={self.images} "
                f"additions={self.additions} multiplications={self.multiplications}")


def synapse_ops(source: np.ndarray, out_channels: int, kernel: tuple[int, int], stride: int, padding: int,
                binary: bool) -> tuple[int, int]:
    """(additions, multiplications) of one weighted sum, bias excluded.

    Binary input: one addition per (active input, output) connection. Real
    input: one multiply and one add per multiply-accumulate that touches a
    real (non-padding) input.
    """
    src = np.asarray(source, dtype=np.float64)
    mask = src if binary else np.ones_like(src)
    if src.ndim == 2:
        conns = int(mask.sum()) * out_channels
    else:
        ones = np.ones((1, src.shape[-1]) + tuple(kernel))
        with tc.no_tape():
            reach = tc.conv2d(Tensor(mask), Tensor(ones), None, stride=stride, padding=padding).data
        conns = int(round(reach.sum())) * out_channels
    return (conns, 0) if binary else (conns, conns)


class OpCounter:
    """Probe accumulating per-layer counts during a forward pass."""

    def __init__(self, mode: str):
        if mode not in ("snn", "ann"):
            raise ValueError(f"mode must be snn or ann, got {mode!r}")
        self.mode = mode
        self.counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])

    def _bump(self, name, adds, muls):
        c = self.counts[name]
        c[0] += int(adds)
        c[1] += int(muls)

    def synapse(self, name, x, weight_shape, stride, padding, out_shape, has_bias, source):
        binary = self.mode == "snn" and bool(np.isin(source, (0.0, 1.0)).all())
        if source is not x:
            # avgpool then 1x1 conv: a 2x2 stride-2 conv on the pre-pool spikes
            kernel, stride, padding = (2, 2), 2, 0
        else:
            kernel = tuple(weight_shape[2:]) if len(weight_shape) == 4 else (1, 1)
        adds, muls = synapse_ops(source, weight_shape[0], kernel, stride, padding, binary)
        if has_bias:
            adds += int(np.prod(out_shape))
        self._bump(name, adds, muls)

    def elementwise(self, name, op, count):
        if op == "tdbn":
            self._bump(name, count, count)
        elif op == "lif":
            if self.mode == "snn":
                self._bump(name, count, count)
            else:
                self.counts.setdefault(name, [0, 0])
        elif op == "add":
            self._bump(name, count, 0)
        else:
            raise ValueError(f"unknown elementwise op {op!r}")


def _report(counter: OpCounter, scope, mode, s, images, divisor) -> OpCountReport:
    breakdown = {k: [v[0] // divisor, v[1] // divisor] for k, v in counter.counts.items()}
    return OpCountReport(sum(v[0] for v in breakdown.values()), sum(v[1] for v in breakdown.values()),
                         breakdown, scope, mode, s, images)


def count_ops(model, mode: str, x: np.ndarray, t: int, sched: NoiseSchedule | None = None,
              t_prev: int | None = None) -> OpCountReport:
    """Counts for one denoising step on the (B, H, W, C) batch ``x``, reported per image.

    ``mode`` is ``snn`` (spike-driven synapses cost additions only) or ``ann``
    (same weights, S=1, every activation real-valued). The signal-space linear
    combination is included when ``sched`` is given. Per-image counts are
    exact when B=1; otherwise they are floor-divided batch totals.
    """
    net = model.with_neuron(num_steps=1) if mode == "ann" else model
    counter = OpCounter(mode)
    net.probe = counter
    b = x.shape[0]
    s = net.num_steps
    try:
        with tc.no_tape():
            xin = encode_folded(Tensor(np.asarray(x, dtype=net.params["conv_in.w"].dtype)), s)
            out = net(xin, np.full(b, t), training=False)
    finally:
        net.probe = None
    if sched is not None:
        ddim_coefficients(t, sched, t_prev)
        n = out.data.size
        counter._bump("ddim_combination", n, 2 * n)
    return _report(counter, "per-denoising-step", mode, s, 1, b)


def count_trajectory_ops(model, mode: str, x_T: np.ndarray, sched: NoiseSchedule, sample_steps: int) -> OpCountReport:
    """Counts for a whole signal-space generation, per image."""
    steps = [int(t) for t in sched.inference_steps(sample_steps)]
    net = model.with_neuron(num_steps=1) if mode == "ann" else model
    counter = OpCounter(mode)
    net.probe = counter
    b, s = x_T.shape[0], net.num_steps
    try:
        with tc.no_tape():
            sig = encode_folded(Tensor(np.asarray(x_T, dtype=net.params["conv_in.w"].dtype)), s).data
            for t, tp in zip(steps, steps[1:] + [0]):
                a_t, b_t = ddim_coefficients(t, sched, tp)
                y = net(Tensor(sig), np.full(b, t), training=False).data
                sig = (a_t * sig + b_t * y).astype(sig.dtype)
                counter._bump("ddim_combination", sig.size, 2 * sig.size)
    finally:
        net.probe = None
    return _report(counter, "per-image", mode, s, 1, b)


@dataclass
class OpComparison:
    snn: OpCountReport
    ann: OpCountReport
    extra: dict = field(default_factory=dict)

    @property
    def mul_reduction(self) -> float:
        return 1.0 - self.snn.multiplications / self.ann.multiplications
