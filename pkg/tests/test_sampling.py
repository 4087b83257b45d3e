import numpy as np
import pytest
from models import LinearStub, ZeroStub, random_unet

from spiking_ddim import tensor as tc
from spiking_ddim.sampling import (
    FusionError,
    SamplerConfig,
    check_fusion,
    compose_kernels,
    fuse_step_conv,
    initial_noise,
    sample_fused,
    sample_reference,
    sample_signal_space,
)
from spiking_ddim.schedule import NoiseSchedule, ddim_coefficients, make_cosine_schedule
from spiking_ddim.snn import decode_folded, encode_folded
from spiking_ddim.tensor import Tensor
from spiking_ddim.unet import UNetConfig, build_unet

SCHED = make_cosine_schedule(100, 4)
SMALL = UNetConfig(image_size=8, base_channels=8, time_embed_dim=16)


@pytest.fixture(scope="module")
def net():
    return random_unet(SMALL, seed=3)


def _noise(batch=4, seed=0, size=8):
    return initial_noise((batch, size, size, 1), seed, np.float32)


def test_zero_stub_closed_form():
    cfg = SamplerConfig(10, batch=3)
    x = _noise(3)
    prod = np.prod([ddim_coefficients(t, SCHED, tp)[0] for t, tp in cfg.steps(SCHED)])
    ref = sample_reference(ZeroStub(), SCHED, cfg, x)
    assert np.allclose(ref, prod * x, rtol=1e-6)
    assert np.array_equal(ref, sample_signal_space(ZeroStub(), SCHED, cfg, x))


def test_all_three_pipelines_coincide_for_zero_network():
    m = build_unet(SMALL, 0)  # last conv starts at zero, so the network outputs zeros
    cfg = SamplerConfig(5, batch=2)
    x = _noise(2)
    ref = sample_reference(m, SCHED, cfg, x)
    assert np.array_equal(ref, sample_signal_space(m, SCHED, cfg, x))
    assert np.abs(sample_fused(m, SCHED, cfg, x) - ref).max() < 1e-6


def test_constant_stub_reference_equals_signal_space():
    for seed in range(3):
        cfg = SamplerConfig(10, seed=seed, batch=4)
        a = sample_reference(LinearStub(), SCHED, cfg)
        b = sample_signal_space(LinearStub(), SCHED, cfg)
        assert np.array_equal(a, b)


def test_nonconstant_stub_deviation_follows_residual_recursion(f64):
    stub = LinearStub(mix=True, w=0.3)
    cfg = SamplerConfig(8, batch=2)
    x = initial_noise((2, 8, 8, 1), 5, np.float64)
    s = stub.num_steps
    gain = stub.w * (1 + 0.2 * np.arange(s)).reshape(-1, 1, 1, 1, 1)
    # reference trajectory and the deviation recursion d' = (a + b W) d + b (I - P) f(enc x)
    xr, d = x.copy(), np.zeros((s,) + x.shape)
    for t, tp in cfg.steps(SCHED):
        a, b = ddim_coefficients(t, SCHED, tp)
        y = stub(encode_folded(Tensor(xr), s), np.full(2, t)).data.reshape((s,) + x.shape)
        resid = y - y.mean(axis=0, keepdims=True)
        d = a * d + b * gain * d + b * resid
        xr = a * xr + b * y.mean(axis=0)
    ref = sample_reference(stub, SCHED, cfg, x)
    sig = sample_signal_space(stub, SCHED, cfg, x)
    assert np.abs(ref - xr).max() < 1e-12
    assert np.abs((sig - ref) - d.mean(axis=0)).max() < 1e-10
    assert np.abs(sig - ref).max() > 1e-3


def test_output_shape_and_reproducibility():
    cfg = SamplerConfig(6, seed=11, batch=3)
    a = sample_reference(LinearStub(), SCHED, cfg)
    assert a.shape == (3, 8, 8, 1)
    assert np.array_equal(a, sample_reference(LinearStub(), SCHED, cfg))


def test_fused_matches_signal_space_on_random_unet(net):
    cfg = SamplerConfig(10, seed=4, batch=4)
    diff = check_fusion(net, SCHED, cfg, tol=1e-4)
    assert diff < 1e-4
    img = sample_signal_space(net, SCHED, cfg)
    assert np.abs(img).max() > 0.1  # the network output actually matters


def test_fused_inter_step_state_is_binary(net):
    _, trace = sample_fused(net, SCHED, SamplerConfig(5, batch=2), return_trace=True)
    assert len(trace) == 5
    assert all(t.kind == "spike" and np.isin(t.values, (0, 1)).all() for t in trace)
    assert any(t.values.any() for t in trace)


def test_fused_reproducible(net):
    cfg = SamplerConfig(4, seed=9, batch=2)
    assert np.array_equal(sample_fused(net, SCHED, cfg), sample_fused(net, SCHED, cfg))


def test_one_step_fused_conv_vs_unfused_composition(net, rng):
    cfg = SamplerConfig(10, batch=3)
    steps = cfg.steps(SCHED)
    x = _noise(3, seed=2)
    s = net.num_steps
    with tc.no_tape():
        sig = encode_folded(Tensor(x), s).data
        first0 = net.first_current(Tensor(sig)).data
        spikes0 = net.body(Tensor(first0), np.full(3, steps[0][0])).data
        a, b = ddim_coefficients(steps[0][0], SCHED, steps[0][1])
        nxt = a * sig + b * net.head(Tensor(spikes0)).data
        want = net.first_current(Tensor(nxt.astype(np.float32))).data
    conv = fuse_step_conv(net, 1, steps, SCHED)
    got = conv.apply(sig, [spikes0])
    assert np.abs(got - want).max() < 1e-5
    assert np.abs(fuse_step_conv(net, 0, steps, SCHED).apply(sig, []) - first0).max() < 1e-5


def test_identity_step_reduces_to_first_conv(net):
    ab = np.array([1.0, 0.5, 0.5, 0.2])
    flat = NoiseSchedule(3, ab, np.ones(4), np.zeros(4), ab, np.zeros(4), 4)
    steps = [(2, 1), (1, 0)]
    assert ddim_coefficients(2, flat, 1) == pytest.approx((1.0, 0.0))
    conv = fuse_step_conv(net, 1, steps, flat)
    k = net.params["conv_in.w"].data
    assert np.array_equal(conv.weight[:, : k.shape[1]], k)
    assert not conv.weight[:, k.shape[1] :].any()


def test_kernel_algebra_shapes(net, rng):
    first = rng.normal(size=(8, 3, 3, 3))
    last = rng.normal(size=(3, 24, 1, 1))
    assert compose_kernels(first, last).shape == (8, 24, 3, 3)
    steps = SamplerConfig(10).steps(SCHED)
    conv = fuse_step_conv(net, 3, steps, SCHED)
    c_in, top = SMALL.in_channels, SMALL.top_channels
    assert conv.weight.shape == (SMALL.base_channels, c_in + 1 + 3 * top, 3, 3)
    assert conv.in_channels == sum(n for _, n in conv.layout)


def test_non_affine_boundary_rejected(net, rng):
    with pytest.raises(FusionError):
        compose_kernels(rng.normal(size=(8, 3, 3, 3)), rng.normal(size=(3, 24, 3, 3)))

    class NoHead:
        params = {"conv_in.w": net.params["conv_in.w"], "conv_in.b": net.params["conv_in.b"]}

    with pytest.raises(FusionError):
        fuse_step_conv(NoHead(), 0, [(10, 0)], SCHED)


def test_drift_is_reported(net):
    cfg = SamplerConfig(3, batch=2)
    x = _noise(2)
    fused = [fuse_step_conv(net, k, cfg.steps(SCHED), SCHED) for k in range(3)]
    fused[1].weight = fused[1].weight * 1.5  # stale or corrupted fused kernel
    diff = np.abs(sample_fused(net, SCHED, cfg, x, fused=fused) - sample_signal_space(net, SCHED, cfg, x)).max()
    assert diff > 1e-4
    with pytest.raises(FusionError, match="fusion-consistency"):
        check_fusion(net, SCHED, cfg, x, tol=-1.0)


def test_subsequences_terminate_with_finite_images(net):
    short = make_cosine_schedule(12, 4)
    full = sample_signal_space(net, short, SamplerConfig(12, batch=2))
    sub = sample_signal_space(net, short, SamplerConfig(4, batch=2))
    assert full.shape == sub.shape == (2, 8, 8, 1)
    assert np.all(np.isfinite(full)) and np.all(np.isfinite(sub))


def test_decode_once_at_end(net):
    cfg = SamplerConfig(3, batch=1)
    x = _noise(1)
    s = net.num_steps
    with tc.no_tape():
        sig = encode_folded(Tensor(x), s).data
        for t, tp in cfg.steps(SCHED):
            a, b = ddim_coefficients(t, SCHED, tp)
            sig = (a * sig + b * net(Tensor(sig), np.full(1, t)).data).astype(np.float32)
        want = decode_folded(Tensor(sig), s).data
    assert np.array_equal(sample_signal_space(net, SCHED, cfg, x), want)
