"""Desk-scale experiments: the SCL on/off ablation and its training-sanity readout."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import load_idx, write_digits_idx
from .metrics import compute_fad, train_autoencoder
from .sampling import SamplerConfig, generate_many
from .schedule import NoiseSchedule, make_cosine_schedule, q_sample
from .snn import NeuronConfig, encode_folded
from .tensor import Tensor
from .train import TrainConfig, scl_residual, smoothed, train_loop
from .unet import UNetConfig, build_unet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSetup:
    image_size: int = 16
    num_steps: int = 4
    T: int = 100
    train_steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    train_images: int = 1000
    sample_count: int = 1000
    sample_steps: int = 20
    residual_images: int = 256
    ae_epochs: int = 30
    base_channels: int = 32


def digits_split(workdir, image_size: int = 16, train_images: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """scikit-learn digits through the IDX path; first ``train_images`` train, the rest held out."""
    path = Path(workdir) / f"digits{image_size}.idx"
    if not path.exists():
        write_digits_idx(path, image_size)
    data = load_idx(path)
    return data[:train_images], data[train_images:]


def eval_residual(model, x0: np.ndarray, sched: NoiseSchedule, seed: int) -> float:
    """Mean enc(dec(.)) residual of eval-mode outputs on a fixed noised batch."""
    rng = np.random.default_rng(seed)
    t = rng.integers(1, sched.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    out = []
    with tc.no_tape():
        for i in range(0, len(x0), 64):
            xt = q_sample(x0[i : i + 64], t[i : i + 64], eps[i : i + 64], sched)
            y = model(encode_folded(Tensor(xt), model.num_steps), t[i : i + 64], training=False).data
            out.append(scl_residual(y, model.num_steps))
    return float(np.mean(np.concatenate(out)))


@dataclass
class RunSummary:
    scl: bool
    totals: list[float]
    final_residual: float
    fad: float
    seconds: float
    train_residual_tail: float
    loss_drop: float = field(default=0.0)


def loss_drop(totals, window: int = 100) -> float:
    """1 - (final smoothed total) / (mean of the first ``window`` totals)."""
    v = np.asarray(totals, dtype=np.float64)
    first = float(v[:window].mean())
    return 1.0 - float(smoothed(v, window)[-1]) / first


def desk_run(setup: DeskSetup, scl: bool, train: np.ndarray, held: np.ndarray, encoder) -> RunSummary:
    with tc.precision(np.float32):
        start = time.time()
        cfg = UNetConfig(image_size=setup.image_size, base_channels=setup.base_channels,
                         neuron=NeuronConfig(num_steps=setup.num_steps))
        model = build_unet(cfg, setup.seed)
        sched = make_cosine_schedule(setup.T, setup.num_steps)
        tcfg = TrainConfig(lr=setup.lr, batch_size=setup.batch, max_steps=setup.train_steps, scl=scl,
                           seed=setup.seed, log_every=100)
        res = train_loop(train, model, sched, tcfg)
        totals = [h.total for h in res.history]
        resid = eval_residual(model, held[: setup.residual_images], sched, setup.seed + 1)
        gen = generate_many(model, sched, setup.sample_count,
                            SamplerConfig(setup.sample_steps, setup.seed + 2, "signal", batch=50))
        fad = compute_fad(encoder, held, np.clip(gen, -1, 1))
        tail = float(np.mean([h.l_scl for h in res.history[-100:]]))
        summary = RunSummary(scl, totals, resid, fad, time.time() - start, tail, loss_drop(totals))
        log.info(f"scl={scl} residual={resid:.6g} fad={fad:.6g} loss_drop={summary.loss_drop:.3f} "
                 f"seconds={summary.seconds:.0f}")
        return summary


def scl_ablation(setup: DeskSetup, workdir) -> dict[str, RunSummary]:
    """Two runs with identical seed and data order, SCL on and off."""
    train, held = digits_split(workdir, setup.image_size, setup.train_images)
    with tc.precision(np.float32):
        encoder = train_autoencoder(train, 128, setup.seed, epochs=setup.ae_epochs)
    return {"scl": desk_run(setup, True, train, held, encoder),
            "no_scl": desk_run(setup, False, train, held, encoder)}


def save_summary(result: dict[str, RunSummary], path) -> None:
    Path(path).write_text(json.dumps({k: asdict(v) for k, v in result.items()}, indent=1))


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_ablation.json")
    save_summary(scl_ablation(DeskSetup(), out.parent), out)
