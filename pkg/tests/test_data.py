import struct

import numpy as np
import pytest
from models import random_unet

from spiking_ddim.data import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    DatasetSpec,
    FormatError,
    RunConfig,
    apply_overrides,
    checkpoint_roundtrip,
    load_checkpoint,
    load_idx,
    load_raw_dir,
    parse_config,
    parse_config_text,
    read_idx_bytes,
    read_png,
    save_checkpoint,
    save_png_grid,
    to_uint8,
    write_digits_idx,
    write_idx,
)
from spiking_ddim.schedule import make_cosine_schedule
from spiking_ddim.train import AdamState
from spiking_ddim.unet import UNetConfig

TINY = UNetConfig(image_size=8, base_channels=8, time_embed_dim=16)


def _idx(path, pixels):
    write_idx(path, np.asarray(pixels, dtype=np.uint8))
    return path


def test_idx_header_and_endpoints(tmp_path):
    p = _idx(tmp_path / "a.idx", [[[0, 255], [128, 1]]])
    raw = p.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03" and struct.unpack(">3I", raw[4:16]) == (1, 2, 2)
    x = load_idx(p)
    assert x.shape == (1, 2, 2, 1) and x.dtype == np.float32
    assert x[0, 0, 0, 0] == -1.0 and x[0, 0, 1, 0] == 1.0
    assert np.array_equal(read_idx_bytes(p), [[[0, 255], [128, 1]]])


def test_idx_resize(tmp_path):
    p = _idx(tmp_path / "a.idx", np.full((2, 4, 4), 255))
    assert np.array_equal(load_idx(p, 8), np.ones((2, 8, 8, 1), np.float32))


def test_idx_truncated_and_bad_magic(tmp_path):
    p = _idx(tmp_path / "a.idx", np.zeros((2, 3, 3)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match=r"offset 16.*expected 34 bytes.*got 29"):
        read_idx_bytes(p)
    p.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_idx_bytes(p)
    p.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_idx_bytes(p)
    p.write_bytes(raw[:2])
    with pytest.raises(FormatError, match="truncated header"):
        read_idx_bytes(p)


def test_write_idx_validates():
    with pytest.raises(ValueError):
        write_idx("unused", np.zeros((2, 2), np.uint8))


def test_digits_corpus(tmp_path):
    p = tmp_path / "digits.idx"
    assert write_digits_idx(p, 16) == 1797
    x = DatasetSpec(str(p), "idx", 16, limit=10).load()
    assert x.shape == (10, 16, 16, 1) and -1 <= x.min() and x.max() <= 1 and x.std() > 0.1


def test_raw_dir(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((10, 12), 255, np.uint8)).save(tmp_path / "b.png")
    Image.fromarray(np.zeros((10, 12), np.uint8)).save(tmp_path / "a.png")
    x = load_raw_dir(tmp_path, 4, 1, crop=8)
    assert x.shape == (2, 4, 4, 1) and x[0].max() == -1 and x[1].min() == 1
    with pytest.raises(FormatError):
        load_raw_dir(tmp_path, 4, 1, crop=20)
    with pytest.raises(FileNotFoundError):
        load_raw_dir(tmp_path / "missing", 4)


def test_png_grid_dimensions_and_roundtrip(tmp_path, rng):
    imgs = rng.uniform(-1, 1, size=(5, 4, 6, 1))
    hw = save_png_grid(imgs, 2, tmp_path / "g.png")
    got = read_png(tmp_path / "g.png")
    assert hw == got.shape == (12, 12)
    assert np.array_equal(got[0:4, 6:12], to_uint8(imgs[1])[..., 0])
    assert not got[8:12, 6:12].any()  # unused tile stays black


def test_png_rgb_and_constant_images(tmp_path):
    save_png_grid(np.full((2, 3, 3, 3), -1.0), 2, tmp_path / "c.png")
    assert read_png(tmp_path / "c.png").shape == (3, 6, 3) and not read_png(tmp_path / "c.png").any()
    with pytest.raises(ValueError):
        save_png_grid(np.zeros((1, 3, 3, 2)), 1, tmp_path / "bad.png")


def _checkpoint(with_opt=True):
    m = random_unet(TINY, seed=5, warmup=2)
    opt = None
    if with_opt:
        opt = AdamState.zeros_like(m.params)
        opt.m = {k: v + 0.5 for k, v in opt.m.items()}
        opt.step = 7
    ck = Checkpoint.from_model(m, make_cosine_schedule(50, 4), step=7, optimizer=opt, note="x")
    ck.extra["fused0.w"] = np.arange(6, dtype=np.float64).reshape(2, 3)
    return m, ck


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    m, ck = _checkpoint()
    back = checkpoint_roundtrip(ck, tmp_path / "c.ckpt")
    assert back.unet == ck.unet and back.step == 7 and back.meta == {"note": "x"}
    assert back.schedule_T == 50 and back.has_moments and back.moments[2] == 7
    for k, v in ck.params.items():
        assert back.params[k].dtype == v.dtype and back.params[k].tobytes() == v.tobytes()
    for k, (mu, var) in ck.bn_stats.items():
        assert back.bn_stats[k][0].tobytes() == mu.tobytes() and back.bn_stats[k][1].tobytes() == var.tobytes()
    assert all(back.moments[0][k].tobytes() == v.tobytes() for k, v in ck.moments[0].items())
    assert back.extra["fused0.w"].dtype == np.float64
    save_checkpoint(back, tmp_path / "d.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()
    rebuilt = back.model()
    assert all(np.array_equal(rebuilt.params[k].data, m.params[k].data) for k in m.params)


def test_checkpoint_without_moments(tmp_path):
    _, ck = _checkpoint(with_opt=False)
    back = checkpoint_roundtrip(ck, tmp_path / "c.ckpt")
    assert not back.has_moments and back.moments is None


def test_checkpoint_corruption_detected(tmp_path):
    _, ck = _checkpoint()
    p = tmp_path / "c.ckpt"
    save_checkpoint(ck, p)
    raw = bytearray(p.read_bytes())
    flipped = raw.copy()
    flipped[-3] ^= 0x01
    p.write_bytes(bytes(flipped))
    with pytest.raises(FormatError, match="checksum mismatch"):
        load_checkpoint(p)
    p.write_bytes(bytes(raw[:-4]))
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(FormatError, match="bad magic"):
        load_checkpoint(p)
    p.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 2) + bytes(raw[12:]))
    with pytest.raises(FormatError, match="version 2"):
        load_checkpoint(p)
    p.write_bytes(bytes(raw) + b"\x00")
    with pytest.raises(FormatError, match="payload size"):
        load_checkpoint(p)


def test_checkpoint_rejects_integer_tensor(tmp_path):
    _, ck = _checkpoint(with_opt=False)
    ck.extra["bad"] = np.arange(3)
    with pytest.raises(ValueError):
        save_checkpoint(ck, tmp_path / "c.ckpt")


CONFIG = """
# desk run
dataset.path = /data/digits.idx
dataset.format = idx
image.size = 16
model.base_channels = 16
model.levels = 3
snn.steps = 8     # longer spike trains
snn.v_threshold = 1.0
snn.tau_decay = 0.8
snn.surrogate_width = 1.0
diffusion.T = 200
train.lr = 0.0005
train.batch = 16
train.epochs = 2
loss.scl = false
loss.signal = true
sample.steps = 20
seed = 9
"""


def test_config_parses_every_key():
    c = parse_config_text(CONFIG)
    assert c.dataset_path == "/data/digits.idx" and c.levels == (1, 2, 3) and c.snn_steps == 8
    assert c.T == 200 and c.lr == 0.0005 and c.batch == 16 and c.epochs == 2
    assert c.scl is False and c.signal is True and c.sample_steps == 20 and c.seed == 9
    assert c.unet().neuron.num_steps == 8 and c.dataset().image_size == 16
    assert parse_config_text("model.levels = 1, 2, 2").levels == (1, 2, 2)


def test_config_defaults():
    assert parse_config_text("") == RunConfig()
    d = RunConfig()
    assert (d.snn_steps, d.v_threshold, d.tau_decay, d.surrogate_width) == (4, 1.0, 0.8, 1.0)
    assert (d.lr, d.scl, d.signal) == (1e-3, True, False)


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("seed = 1\nsnn.steps = -1", r"<config>:2: snn_steps = -1 violates S >= 1"),
        ("image.sized = 3", r"<config>:1: unknown key 'image.sized'"),
        ("\n\ntrain.lr = fast", r"<config>:3: bad value for train.lr"),
        ("train.lr", r"expected 'key = value'"),
        ("snn.tau_decay = 1.5", "tau_decay"),
        ("loss.scl = maybe", "boolean"),
        ("dataset.format = zip", "idx or raw-dir"),
    ],
)
def test_config_errors_name_the_line(text, pattern):
    with pytest.raises(FormatError, match=pattern):
        parse_config_text(text)


def test_config_file_and_overrides(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        parse_config(tmp_path / "nope.cfg")
    p = tmp_path / "run.cfg"
    p.write_text("train.lr = 0.01\nseed = 3\n")
    c = apply_overrides(parse_config(p), seed=5, lr=None)
    assert c.seed == 5 and c.lr == 0.01
    with pytest.raises(FormatError):
        apply_overrides(c, snn_steps=0)
    with pytest.raises(KeyError):
        apply_overrides(c, bogus=1)
