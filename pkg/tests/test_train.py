import copy

import numpy as np
import pytest
from models import FixedOutputStub, LinearStub, random_unet

from spiking_ddim import tensor as tc
from spiking_ddim.schedule import make_cosine_schedule, q_sample, velocity_target
from spiking_ddim.train import (
    AdamState,
    TrainConfig,
    adam_update,
    scl_residual,
    signal_loss,
    smoothed,
    train_loop,
    training_step,
)
from spiking_ddim.unet import UNetConfig

SCHED = make_cosine_schedule(100, 4)
TINY = UNetConfig(image_size=8, base_channels=8, time_embed_dim=16)


def _batch(rng, b=4, dtype=np.float64):
    return rng.uniform(-1, 1, size=(b, 8, 8, 1)).astype(dtype)


def _draws(rng, x0):
    """Replay the generator exactly as training_step consumes it."""
    r = copy.deepcopy(rng)
    t = r.integers(1, SCHED.T + 1, size=x0.shape[0])
    eps = r.standard_normal(x0.shape).astype(x0.dtype)
    return t, eps


class AdditiveStub:
    """Output = (encoded input) * 0 + p, with p a trainable folded tensor; exposes dLoss/dy."""

    def __init__(self, y):
        self.num_steps = 4
        self.p = tc.Tensor(y.copy(), requires_grad=True)
        self.params = {"p": self.p}

    def __call__(self, x, t, training=False):
        return tc.add(tc.scale(x, 0.0), self.p)

    def trainable(self):
        return [self.p]


def test_perfect_prediction_gives_zero_loss(f64, rng):
    x0 = _batch(rng)
    t, eps = _draws(rng, x0)
    v = velocity_target(x0, eps, t, SCHED)
    stub = FixedOutputStub(np.concatenate([v] * 4))
    _, parts = training_step(stub, x0, rng, SCHED, TrainConfig())
    assert parts.l_ddpm == 0 and parts.l_scl == 0 and parts.total == 0
    assert np.array_equal(parts.t, t)


def test_losses_match_independent_computation(f64, rng):
    x0 = _batch(rng, 3)
    t, eps = _draws(rng, x0)
    stub = LinearStub(mix=True)
    _, parts = training_step(stub, x0, rng, SCHED, TrainConfig(signal_loss=True))
    xt = q_sample(x0, t, eps, SCHED)
    v = velocity_target(x0, eps, t, SCHED)
    y = stub(tc.Tensor(np.concatenate([xt] * 4)), t).data.reshape((4,) + x0.shape)
    ddpm = ((y.mean(0) - v) ** 2).mean(axis=(1, 2, 3))
    scl = ((y - y.mean(0)) ** 2).mean(axis=(0, 2, 3, 4))
    sig = ((y - v) ** 2).mean(axis=(0, 2, 3, 4))
    ab = SCHED.alpha_bar[t]
    lam = np.abs(SCHED.b_coef[t]) / 4
    want = np.mean(ab * ddpm + lam * scl + lam * sig)
    assert np.allclose(parts.ddpm_per_sample, ddpm, rtol=1e-12)
    assert np.allclose(parts.scl_per_sample, scl, rtol=1e-12)
    assert np.allclose(parts.signal_per_sample, sig, rtol=1e-12)
    assert abs(parts.total - want) < 1e-12
    assert abs(parts.recompute_total() - parts.total) < 1e-6
    assert np.allclose(scl_residual(y.reshape((-1,) + x0.shape[1:]), 4), scl)


def test_temporally_constant_output_has_zero_scl(rng):
    _, parts = training_step(LinearStub(), _batch(rng), rng, SCHED, TrainConfig())
    assert parts.l_scl == 0.0
    assert parts.l_ddpm > 0


def test_scl_switch(f64, rng):
    x0 = _batch(rng)
    r2 = copy.deepcopy(rng)
    _, on = training_step(LinearStub(mix=True), x0, rng, SCHED, TrainConfig(scl=True))
    _, off = training_step(LinearStub(mix=True), x0, r2, SCHED, TrainConfig(scl=False))
    assert on.l_scl == off.l_scl > 0
    assert abs(off.total - np.mean(off.gamma * off.ddpm_per_sample)) < 1e-12
    assert on.total > off.total
    assert abs(off.recompute_total() - off.total) < 1e-12


def test_loss_gradient_matches_finite_differences(f64, rng):
    x0 = _batch(rng, 2)
    stub = AdditiveStub(rng.normal(size=(8, 8, 8, 1)))
    cfg = TrainConfig(signal_loss=True)
    grads, parts = training_step(stub, x0, copy.deepcopy(rng), SCHED, cfg)
    g = grads[stub.p]
    h = 1e-6
    for idx in [(0, 1, 2, 0), (5, 3, 3, 0), (7, 7, 0, 0)]:
        stub.p.data[idx] += h
        _, up = training_step(stub, x0, copy.deepcopy(rng), SCHED, cfg)
        stub.p.data[idx] -= 2 * h
        _, dn = training_step(stub, x0, copy.deepcopy(rng), SCHED, cfg)
        stub.p.data[idx] += h
        assert abs((up.total - dn.total) / (2 * h) - g[idx]) < 1e-7


def test_signal_loss_examples():
    z = np.ones((1, 2, 2, 1))
    y = np.concatenate([np.ones((1, 2, 2, 1)), 3 * np.ones((1, 2, 2, 1))])
    lam = SCHED.lam[10]
    assert signal_loss(y, z, 10, SCHED) == pytest.approx([lam * 2.0])
    assert signal_loss(np.concatenate([z, z]), z, 10, SCHED)[0] == 0


def test_adam_first_step_and_zero_gradient():
    cfg = TrainConfig(lr=0.01)
    p = {"a": tc.Tensor(np.array([1.0, -2.0, 3.0])), "b": tc.Tensor(np.array([5.0]))}
    st = AdamState.zeros_like(p)
    before = p["a"].data
    adam_update(p, {"a": np.array([0.5, -3.0, 1e-3]), "b": np.zeros(1)}, st, cfg)
    assert np.allclose(p["a"].data, [0.99, -1.99, 2.99], atol=1e-7)
    assert p["b"].data[0] == 5.0
    assert before is not p["a"].data and before[0] == 1.0  # replaced, not mutated


def test_adam_matches_reference_over_steps(rng):
    cfg = TrainConfig(lr=0.05, beta1=0.8, beta2=0.99)
    p = {"w": tc.Tensor(rng.normal(size=5))}
    st = AdamState.zeros_like(p)
    w, m, v = p["w"].data.copy(), np.zeros(5), np.zeros(5)
    for k in range(1, 6):
        g = rng.normal(size=5)
        adam_update(p, {"w": g}, st, cfg)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.05 * (m / (1 - 0.8**k)) / (np.sqrt(v / (1 - 0.99**k)) + 1e-8)
    assert np.abs(p["w"].data - w).max() < 1e-12 and st.step == 5


def test_adam_rejects_mismatched_moments():
    p = {"w": tc.Tensor(np.zeros(3))}
    st = AdamState({"w": np.zeros(2)}, {"w": np.zeros(2)})
    with pytest.raises(ValueError, match="moment shape"):
        adam_update(p, {"w": np.zeros(3)}, st, TrainConfig())


def test_config_rejects_bad_values():
    for bad in (dict(lr=0), dict(beta1=1.0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_every_parameter_receives_gradient(rng):
    m = random_unet(TINY, seed=1)
    grads, parts = training_step(m, _batch(rng, 4, np.float32), rng, SCHED, TrainConfig())
    assert parts.total >= 0
    dead = [k for k, p in m.params.items() if not np.any(grads[p])]
    assert dead == []


def test_train_loop_history_checkpoints_and_determinism(rng):
    data = _batch(rng, 12, np.float32)
    cfg = TrainConfig(batch_size=4, max_steps=5, checkpoint_every=2, seed=3)
    calls = []
    a = train_loop(data, random_unet(TINY, seed=2, warmup=2), SCHED, cfg,
                   checkpoint_sink=lambda s, m, o: calls.append((s, o.step)))
    b = train_loop(data, random_unet(TINY, seed=2, warmup=2), SCHED, cfg)
    assert a.step == 5 and len(a.history) == 5 and a.optimizer.step == 5
    assert calls == [(2, 2), (4, 4), (5, 5)]
    assert [h.total for h in a.history] == [h.total for h in b.history]
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)
    assert all(1 <= h.t.min() and h.t.max() <= 100 and h.total >= 0 for h in a.history)


def test_epochs_drop_last_partial_batch(rng):
    cfg = TrainConfig(batch_size=4, epochs=2)
    r = train_loop(_batch(rng, 9, np.float32), random_unet(TINY, warmup=1), SCHED, cfg)
    assert r.step == 4


def test_sink_failure_surfaces(rng):
    def sink(step, model, opt):
        raise OSError("disk full")

    cfg = TrainConfig(batch_size=4, max_steps=1)
    with pytest.raises(OSError, match="disk full"):
        train_loop(_batch(rng, 4, np.float32), random_unet(TINY, warmup=1), SCHED, cfg, checkpoint_sink=sink)


def test_non_finite_loss_aborts_with_diagnostics(rng):
    data = _batch(rng, 4, np.float32)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="step=0 t="):
        train_loop(data, random_unet(TINY, warmup=1), SCHED, TrainConfig(batch_size=4, max_steps=1))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_loop(np.zeros((0, 8, 8, 1)), random_unet(TINY, warmup=0), SCHED, TrainConfig())


def test_log_line_format(rng):
    _, parts = training_step(LinearStub(), _batch(rng), rng, SCHED, TrainConfig())
    line = parts.log_line(7)
    assert line.startswith("step=7 t=") and "l_ddpm=" in line and "l_scl=" in line and "total=" in line


def test_smoothed():
    assert np.allclose(smoothed([1, 3, 5, 7], 2), [1, 2, 4, 6])
