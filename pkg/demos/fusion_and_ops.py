"""Compare the three samplers on one network and print SNN vs ANN operation counts.

    python demos/fusion_and_ops.py [CHECKPOINT]

Without a checkpoint a randomly initialized desk-size network is used (its
last conv is re-drawn so the output is not identically zero).
"""

import sys

import numpy as np

from spiking_ddim import tensor as tc
from spiking_ddim.data import load_checkpoint
from spiking_ddim.metrics import count_ops, count_trajectory_ops
from spiking_ddim.sampling import SamplerConfig, fuse_all, initial_noise, sample_fused, sample_reference, \
    sample_signal_space
from spiking_ddim.schedule import make_cosine_schedule
from spiking_ddim.unet import UNetConfig, build_unet


def load(argv):
    if len(argv) > 1:
        ck = load_checkpoint(argv[1])
        return ck.model(), ck.schedule()
    model = build_unet(UNetConfig(), seed=0)
    rng = np.random.default_rng(1)
    for k in ("conv_out.w", "conv_out.b"):
        model.params[k].data = rng.uniform(-0.5, 0.5, model.params[k].shape).astype(np.float32)
    # a few train-mode passes so the normalization statistics are not at their initial values
    with tc.no_tape():
        for _ in range(10):
            x = rng.normal(size=(16, 16, 16, 1)).astype(np.float32)
            model(tc.Tensor(x), rng.integers(1, 101, size=4), training=True)
    return model, make_cosine_schedule(100, model.num_steps)


def main():
    model, sched = load(sys.argv)
    cfg = SamplerConfig(10, seed=0, batch=4)
    x = initial_noise((4, model.cfg.image_size, model.cfg.image_size, model.cfg.in_channels), 0, np.float32)

    ref = sample_reference(model, sched, cfg, x)
    sig = sample_signal_space(model, sched, cfg, x)
    fused = sample_fused(model, sched, cfg, x)
    print(f"signal vs fused     max abs {np.abs(sig - fused).max():.2e}")
    print(f"reference vs signal max abs {np.abs(ref - sig).max():.2e} (nonzero unless outputs are temporally constant)")

    convs = fuse_all(model, sched, cfg)
    print("fused step conv input channels:", [c.in_channels for c in convs])

    snn = count_ops(model, "snn", x[:1], sched.T // 2)
    ann = count_ops(model, "ann", x[:1], sched.T // 2)
    print(snn.table())
    print(snn.key_values())
    print(ann.key_values())
    print(f"multiplication reduction {100 * (1 - snn.multiplications / ann.multiplications):.1f}%")
    traj = count_trajectory_ops(model, "snn", x[:1], sched, 10)
    print(traj.key_values())


if __name__ == "__main__":
    main()
