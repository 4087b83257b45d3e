"""Train a small Spiking UNet on 16x16 digits for a few hundred steps, then sample from it.

    python demos/quickstart.py [WORKDIR] [STEPS]

Writes digits16.idx, quickstart.ckpt and quickstart.png into WORKDIR (default ./quickstart).
Expect roughly 1.5 s per training step on one CPU core.
"""

import logging
import sys
from pathlib import Path

import numpy as np

from spiking_ddim.data import Checkpoint, save_checkpoint, save_png_grid
from spiking_ddim.experiments import digits_split
from spiking_ddim.sampling import SamplerConfig, generate_many
from spiking_ddim.schedule import make_cosine_schedule
from spiking_ddim.train import TrainConfig, smoothed, train_loop
from spiking_ddim.unet import UNetConfig, build_unet


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    work = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart")
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300
    work.mkdir(parents=True, exist_ok=True)

    train, held = digits_split(work, 16, 1000)
    print(f"train={train.shape} held_out={held.shape}")

    model = build_unet(UNetConfig(), seed=0)
    sched = make_cosine_schedule(100, model.num_steps)
    print(f"parameters={model.parameter_count()}")

    res = train_loop(train, model, sched, TrainConfig(max_steps=steps, log_every=50))
    totals = [h.total for h in res.history]
    print(f"smoothed total loss: first={smoothed(totals, 50)[49]:.4f} last={smoothed(totals, 50)[-1]:.4f}")

    save_checkpoint(Checkpoint.from_model(model, sched, res.step, res.optimizer), work / "quickstart.ckpt")
    imgs = generate_many(model, sched, 16, SamplerConfig(20, seed=0))
    save_png_grid(np.clip(imgs, -1, 1), 4, work / "quickstart.png")
    print(f"wrote {work / 'quickstart.ckpt'} and {work / 'quickstart.png'}")


if __name__ == "__main__":
    main()
