"""Command-line entry points: train, sample, fuse, eval, count-ops.

Precedence for every setting: flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    Checkpoint,
    DatasetSpec,
    RunConfig,
    apply_overrides,
    load_checkpoint,
    parse_config,
    save_checkpoint,
    save_png_grid,
)
from .metrics import compute_fad, count_ops, count_trajectory_ops, train_autoencoder
from .sampling import FusedStepConv, SamplerConfig, fuse_all, generate_many, initial_noise
from .train import AdamState, TrainConfig, train_loop
from .unet import build_unet

log = logging.getLogger("spiking_ddim")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spiking-ddim", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a Spiking UNet (flags override the config file)")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from (weights, moments, step)")
    t.add_argument("--out", default="model.ckpt", help="checkpoint written during and after training")
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset", dest="dataset_path")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--scl", choices=("on", "off"))
    t.add_argument("--signal-loss", choices=("on", "off"))
    t.add_argument("--grid", help="PNG grid of 16 signal-space samples written at the end")

    s = sub.add_parser("sample", help="generate a PNG grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pipeline", choices=("reference", "signal", "fused"), default="signal")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--columns", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--npy", help="also save the raw float images (pre-quantization)")

    f = sub.add_parser("fuse", help="precompute fused step convs into a checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int, default=10)
    f.add_argument("--seed", type=int, default=0, help="accepted for uniformity; fusion is deterministic")

    e = sub.add_parser("eval", help="desk FAD of generated vs dataset images")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--format", choices=("idx", "raw-dir"), default="idx")
    e.add_argument("--metric", choices=("fad",), default="fad")
    e.add_argument("--count", type=int, default=500)
    e.add_argument("--steps", type=int, default=10)
    e.add_argument("--pipeline", choices=("reference", "signal", "fused"), default="signal")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ae-epochs", type=int, default=20)

    c = sub.add_parser("count-ops", help="addition/multiplication counts")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--mode", choices=("snn", "ann"), required=True)
    c.add_argument("--scope", choices=("step", "image"), default="step")
    c.add_argument("--steps", type=int, default=10, help="sampling steps for --scope image")
    c.add_argument("--t", type=int, help="diffusion step for --scope step (default T/2)")
    c.add_argument("--seed", type=int, default=0)
    return p


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _train(a) -> int:
    cfg = parse_config(_require(a.config, "config file"))
    onoff = {"on": True, "off": False, None: None}
    cfg = apply_overrides(cfg, seed=a.seed, dataset_path=a.dataset_path, max_steps=a.max_steps, epochs=a.epochs,
                          batch=a.batch, lr=a.lr, scl=onoff[a.scl], signal=onoff[a.signal_loss])
    data = cfg.dataset().load()
    if a.resume:
        ck = load_checkpoint(_require(a.resume, "checkpoint"))
        model, sched, start = ck.model(), ck.schedule(), ck.step
        opt = AdamState(*ck.moments) if ck.moments else None
    else:
        from .schedule import make_cosine_schedule

        model = build_unet(cfg.unet(), cfg.seed)
        sched = make_cosine_schedule(cfg.T, cfg.snn_steps)
        start, opt = 0, None
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch, epochs=cfg.epochs, max_steps=cfg.max_steps, scl=cfg.scl,
                       signal_loss=cfg.signal, seed=cfg.seed, log_every=cfg.log_every,
                       checkpoint_every=cfg.checkpoint_every)

    def sink(step, m, o):
        save_checkpoint(Checkpoint.from_model(m, sched, step, o), a.out)
        log.info(f"checkpoint={a.out} step={step}")

    res = train_loop(data, model, sched, tcfg, sink, opt, start)
    if a.grid:
        imgs = generate_many(res.model, sched, 16, SamplerConfig(cfg.sample_steps, cfg.seed, "signal"))
        save_png_grid(imgs, 4, a.grid)
    print(f"steps={res.step} final_total={res.history[-1].total if res.history else float('nan'):.6g} out={a.out}")
    return 0


def _fused_from(ck: Checkpoint, steps: int) -> list[FusedStepConv] | None:
    if ck.meta.get("fused_steps") != steps:
        return None
    return [FusedStepConv(ck.extra[f"fused{k}.w"], ck.extra[f"fused{k}.b"], 0.0) for k in range(steps)]


def _sample(a) -> int:
    ck = load_checkpoint(_require(a.ckpt, "checkpoint"))
    model, sched = ck.model(), ck.schedule()
    scfg = SamplerConfig(a.steps, a.seed, a.pipeline, min(a.batch, a.count))
    fused = _fused_from(ck, a.steps) if a.pipeline == "fused" else None
    imgs = generate_many(model, sched, a.count, scfg, fused)
    cols = a.columns or int(np.ceil(np.sqrt(a.count)))
    h, w = save_png_grid(imgs, cols, a.out)
    if a.npy:
        np.save(a.npy, imgs)
    print(f"pipeline={a.pipeline} count={a.count} steps={a.steps} seed={a.seed} out={a.out} grid={h}x{w}")
    return 0


def _fuse(a) -> int:
    ck = load_checkpoint(_require(a.ckpt, "checkpoint"))
    convs = fuse_all(ck.model(), ck.schedule(), SamplerConfig(a.steps))
    for k, conv in enumerate(convs):
        ck.extra[f"fused{k}.w"] = conv.weight
        ck.extra[f"fused{k}.b"] = conv.bias
    ck.meta["fused_steps"] = a.steps
    save_checkpoint(ck, a.out)
    print(f"fused_steps={a.steps} in_channels_last={convs[-1].in_channels} out={a.out}")
    return 0


def _eval(a) -> int:
    ck = load_checkpoint(_require(a.ckpt, "checkpoint"))
    _require(a.dataset, "dataset")
    real = DatasetSpec(a.dataset, a.format, ck.unet.image_size, ck.unet.in_channels).load()
    ae = train_autoencoder(real, 128, a.seed, epochs=a.ae_epochs)
    fake = generate_many(ck.model(), ck.schedule(), a.count, SamplerConfig(a.steps, a.seed, a.pipeline))
    print(f"metric=fad value={compute_fad(ae, real, fake):.6g} real={len(real)} generated={len(fake)}")
    return 0


def _count(a) -> int:
    ck = load_checkpoint(_require(a.ckpt, "checkpoint"))
    model, sched = ck.model(), ck.schedule()
    shape = (1, ck.unet.image_size, ck.unet.image_size, ck.unet.in_channels)
    x = initial_noise(shape, a.seed, next(iter(ck.params.values())).dtype)
    if a.scope == "step":
        report = count_ops(model, a.mode, x, a.t or max(sched.T // 2, 1), sched)
    else:
        report = count_trajectory_ops(model, a.mode, x, sched, a.steps)
    print(report.table())
    print(report.key_values())
    return 0


COMMANDS = {"train": _train, "sample": _sample, "fuse": _fuse, "eval": _eval, "count-ops": _count}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
