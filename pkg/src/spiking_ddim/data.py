"""Dataset ingestion, PNG grids, the checkpoint container and the run-config grammar."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .schedule import NoiseSchedule, make_cosine_schedule
from .snn import NeuronConfig
from .tensor import NormStats, Tensor
from .unet import SpikingUNet, UNetConfig

IDX_IMAGE_MAGIC = 0x00000803


class FormatError(ValueError):
    """Malformed IDX, checkpoint or config input."""


# -- IDX ---------------------------------------------------------------------


def read_idx_bytes(path) -> np.ndarray:
    """Raw uint8 image array (N, H, W) from an IDX image file."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0: need 4 bytes, have {len(raw)}")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension table at offset 4: need {head} bytes, have {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = head + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload at offset {head}: expected {expected} bytes in total, got {len(raw)}"
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after offset {expected}")
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, images: np.ndarray) -> None:
    """Write a uint8 (N, H, W) array as an IDX image file."""
    arr = np.asarray(images)
    if arr.dtype != np.uint8 or arr.ndim != 3:
        raise ValueError(f"IDX images must be uint8 (N, H, W), got {arr.dtype} {arr.shape}")
    Path(path).write_bytes(struct.pack(">I", IDX_IMAGE_MAGIC) + struct.pack(">3I", *arr.shape) + arr.tobytes())


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


def load_idx(path, image_size: int | None = None) -> np.ndarray:
    """IDX image file -> float32 (N, H, W, 1) in [-1, 1], optionally resized."""
    raw = read_idx_bytes(path)
    if image_size is not None:
        raw = np.stack([_resize(im, image_size) for im in raw])
    return to_unit_range(raw)[..., None]


def load_raw_dir(path, image_size: int, channels: int = 1, crop: int | None = None) -> np.ndarray:
    """Every PNG/JPEG in a directory (sorted by name), center-cropped then resized."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FormatError(f"{root}: no PNG or JPEG images")
    out = []
    for f in files:
        with Image.open(f) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if crop is not None:
                w, h = im.size
                if crop > min(w, h):
                    raise FormatError(f"{f}: crop {crop} exceeds image size {w}x{h}")
                left, top = (w - crop) // 2, (h - crop) // 2
                im = im.crop((left, top, left + crop, top + crop))
            arr = np.asarray(im.resize((image_size, image_size), Image.BILINEAR))
        out.append(arr if arr.ndim == 3 else arr[..., None])
    return to_unit_range(np.stack(out))


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    format: Literal["idx", "raw-dir"] = "idx"
    image_size: int = 16
    channels: int = 1
    crop: int | None = None
    limit: int | None = None

    def load(self) -> np.ndarray:
        if self.format == "idx":
            data = load_idx(self.path, self.image_size)
        elif self.format == "raw-dir":
            data = load_raw_dir(self.path, self.image_size, self.channels, self.crop)
        else:
            raise FormatError(f"unknown dataset format {self.format!r}")
        if self.limit is not None:
            data = data[: self.limit]
        if data.size and (data.min() < -1 or data.max() > 1):
            raise FormatError("decoded pixels left [-1, 1]")
        return data


def write_digits_idx(path, image_size: int = 16) -> int:
    """The 1797 scikit-learn 8x8 digits, upscaled to ``image_size`` and stored as IDX; returns the count."""
    from sklearn.datasets import load_digits

    digits = load_digits().images  # values 0..16
    pixels = np.clip(np.round(digits * (255.0 / 16.0)), 0, 255).astype(np.uint8)
    write_idx(path, np.stack([_resize(im, image_size) for im in pixels]))
    return len(pixels)


# -- PNG ---------------------------------------------------------------------


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round((np.clip(images, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def save_png_grid(images: np.ndarray, columns: int, path) -> tuple[int, int]:
    """Tile (N, H, W, C) images row-major into one PNG; returns (height, width) of the grid."""
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    if imgs.ndim != 4 or imgs.shape[-1] not in (1, 3):
        raise ValueError(f"expected (N, H, W, 1|3) images, got {imgs.shape}")
    if columns < 1:
        raise ValueError("columns must be >= 1")
    n, h, w, c = imgs.shape
    rows = -(-n // columns)
    grid = np.zeros((rows * h, columns * w, c), dtype=np.uint8)
    for i, im in enumerate(to_uint8(imgs)):
        r, q = divmod(i, columns)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = im
    Image.fromarray(grid[..., 0] if c == 1 else grid).save(path, format="PNG")
    return grid.shape[0], grid.shape[1]


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"FSDDIMCK"
CHECKPOINT_VERSION = 1


def tensor_checksum(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


@dataclass
class Checkpoint:
    unet: UNetConfig
    schedule_T: int
    schedule_offset: float
    literal_lambda_sign: bool
    params: dict[str, np.ndarray]
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]]
    step: int = 0
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray], int] | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def has_moments(self) -> bool:
        return self.moments is not None

    def schedule(self) -> NoiseSchedule:
        return make_cosine_schedule(self.schedule_T, self.unet.neuron.num_steps, self.schedule_offset,
                                    self.literal_lambda_sign)

    def model(self) -> SpikingUNet:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        stats = {k: NormStats(m.copy(), v.copy(), self.unet.neuron.bn_momentum) for k, (m, v) in self.bn_stats.items()}
        return SpikingUNet(self.unet, params, stats)

    @classmethod
    def from_model(cls, model: SpikingUNet, sched: NoiseSchedule, step: int = 0, optimizer=None, **meta) -> "Checkpoint":
        moments = None
        if optimizer is not None:
            moments = ({k: v.copy() for k, v in optimizer.m.items()},
                       {k: v.copy() for k, v in optimizer.v.items()}, int(optimizer.step))
        return cls(
            unet=model.cfg,
            schedule_T=sched.T,
            schedule_offset=sched.offset,
            literal_lambda_sign=sched.literal_lambda_sign,
            params={k: p.data.copy() for k, p in model.params.items()},
            bn_stats={k: (s.mean.copy(), s.var.copy()) for k, s in model.stats.items()},
            step=step,
            moments=moments,
            meta=dict(meta),
        )


def _unet_to_json(cfg: UNetConfig) -> dict:
    d = asdict(cfg)
    d["channel_multipliers"] = list(cfg.channel_multipliers)
    return d


def _unet_from_json(d: dict) -> UNetConfig:
    d = dict(d)
    d["neuron"] = NeuronConfig(**d["neuron"])
    d["channel_multipliers"] = tuple(d["channel_multipliers"])
    return UNetConfig(**d)


def _entries(ck: Checkpoint):
    for k, v in ck.params.items():
        yield "param", k, v
    for k, (m, v) in ck.bn_stats.items():
        yield "bn_mean", k, m
        yield "bn_var", k, v
    if ck.moments is not None:
        for k, v in ck.moments[0].items():
            yield "adam_m", k, v
        for k, v in ck.moments[1].items():
            yield "adam_v", k, v
    for k, v in ck.extra.items():
        yield "extra", k, v


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Magic, version, header length, JSON header, then little-endian tensor payloads."""
    table, blobs, offset = [], [], 0
    for group, name, arr in _entries(ck):
        arr = np.asarray(arr)
        if arr.dtype.kind != "f":
            raise ValueError(f"{group}/{name}: only float tensors are stored, got {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        payload = np.ascontiguousarray(le).tobytes()
        table.append({"group": group, "name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(payload), "checksum": tensor_checksum(payload)})
        blobs.append(payload)
        offset += len(payload)
    header = {
        "unet": _unet_to_json(ck.unet),
        "schedule": {"T": ck.schedule_T, "offset": ck.schedule_offset, "literal_lambda_sign": ck.literal_lambda_sign},
        "step": ck.step,
        "adam_step": None if ck.moments is None else ck.moments[2],
        "meta": ck.meta,
        "tensors": table,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)) + hb)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    pre = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < pre or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at offset 0)")
    version, hlen = struct.unpack_from("<IQ", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})")
    if len(raw) < pre + hlen:
        raise FormatError(f"{path}: truncated header at offset {pre}")
    try:
        header = json.loads(raw[pre : pre + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from None
    base = pre + hlen
    groups: dict[str, dict[str, np.ndarray]] = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        payload = raw[start : start + e["nbytes"]]
        if len(payload) != e["nbytes"]:
            raise FormatError(f"{path}: tensor {e['name']} truncated at offset {start}")
        if tensor_checksum(payload) != e["checksum"]:
            raise FormatError(f"{path}: checksum mismatch for {e['group']}/{e['name']} at offset {start}")
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        groups.setdefault(e["group"], {})[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    if len(raw) != base + sum(e["nbytes"] for e in header["tensors"]):
        raise FormatError(f"{path}: payload size does not match the tensor table")
    means, vars_ = groups.get("bn_mean", {}), groups.get("bn_var", {})
    moments = None
    if header["adam_step"] is not None:
        moments = (groups.get("adam_m", {}), groups.get("adam_v", {}), int(header["adam_step"]))
    sch = header["schedule"]
    return Checkpoint(
        unet=_unet_from_json(header["unet"]),
        schedule_T=int(sch["T"]),
        schedule_offset=float(sch["offset"]),
        literal_lambda_sign=bool(sch["literal_lambda_sign"]),
        params=groups.get("param", {}),
        bn_stats={k: (means[k], vars_[k]) for k in means},
        step=int(header["step"]),
        moments=moments,
        extra=groups.get("extra", {}),
        meta=header.get("meta", {}),
    )


def checkpoint_roundtrip(ck: Checkpoint, path) -> Checkpoint:
    save_checkpoint(ck, path)
    return load_checkpoint(path)


# -- run configuration -----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs; built from defaults, a config file, then flag overrides."""

    dataset_path: str = ""
    dataset_format: str = "idx"
    dataset_crop: int | None = None
    dataset_limit: int | None = None
    image_size: int = 16
    channels: int = 1
    base_channels: int = 32
    levels: tuple[int, ...] = (1, 2)
    res_blocks: int = 1
    time_embed: int = 64
    snn_steps: int = 4
    v_threshold: float = 1.0
    tau_decay: float = 0.8
    surrogate_width: float = 1.0
    T: int = 100
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 1
    max_steps: int | None = None
    checkpoint_every: int | None = None
    log_every: int = 100
    scl: bool = True
    signal: bool = False
    sample_steps: int = 10
    seed: int = 0

    def neuron(self) -> NeuronConfig:
        return NeuronConfig(self.v_threshold, self.tau_decay, self.surrogate_width, self.snn_steps)

    def unet(self) -> UNetConfig:
        return UNetConfig(self.image_size, self.channels, self.channels, self.base_channels, self.levels,
                          self.res_blocks, self.time_embed, self.neuron())

    def dataset(self) -> DatasetSpec:
        return DatasetSpec(self.dataset_path, self.dataset_format, self.image_size, self.channels,
                           self.dataset_crop, self.dataset_limit)


def _as_bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _as_levels(text: str) -> tuple[int, ...]:
    """``n`` means multipliers 1..n; a comma list gives them explicitly."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    vals = tuple(int(p) for p in parts)
    if len(vals) == 1:
        return tuple(range(1, vals[0] + 1))
    return vals


def _opt_int(text: str) -> int | None:
    return None if text.lower() in ("none", "") else int(text)


# key -> (field, parser, validator message or None)
CONFIG_KEYS = {
    "dataset.path": ("dataset_path", str),
    "dataset.format": ("dataset_format", str),
    "dataset.crop": ("dataset_crop", _opt_int),
    "dataset.limit": ("dataset_limit", _opt_int),
    "image.size": ("image_size", int),
    "image.channels": ("channels", int),
    "model.base_channels": ("base_channels", int),
    "model.levels": ("levels", _as_levels),
    "model.res_blocks": ("res_blocks", int),
    "model.time_embed": ("time_embed", int),
    "snn.steps": ("snn_steps", int),
    "snn.v_threshold": ("v_threshold", float),
    "snn.tau_decay": ("tau_decay", float),
    "snn.surrogate_width": ("surrogate_width", float),
    "diffusion.T": ("T", int),
    "train.lr": ("lr", float),
    "train.batch": ("batch", int),
    "train.epochs": ("epochs", int),
    "train.max_steps": ("max_steps", _opt_int),
    "train.checkpoint_every": ("checkpoint_every", _opt_int),
    "train.log_every": ("log_every", int),
    "loss.scl": ("scl", _as_bool),
    "loss.signal": ("signal", _as_bool),
    "sample.steps": ("sample_steps", int),
    "seed": ("seed", int),
}

_LIMITS = {
    "snn_steps": (1, "S >= 1"),
    "image_size": (1, "image size >= 1"),
    "base_channels": (1, "base channels >= 1"),
    "res_blocks": (1, "res blocks >= 1"),
    "T": (1, "T >= 1"),
    "batch": (1, "batch >= 1"),
    "epochs": (1, "epochs >= 1"),
    "sample_steps": (1, "sample steps >= 1"),
    "channels": (1, "channels >= 1"),
}


def _validate(name: str, value, where: str):
    if name in _LIMITS and value < _LIMITS[name][0]:
        raise FormatError(f"{where}: {name} = {value} violates {_LIMITS[name][1]}")
    if name in ("lr", "v_threshold", "surrogate_width") and not value > 0:
        raise FormatError(f"{where}: {name} must be > 0, got {value}")
    if name == "tau_decay" and not 0 <= value < 1:
        raise FormatError(f"{where}: tau_decay must lie in [0, 1), got {value}")
    if name == "dataset_format" and value not in ("idx", "raw-dir"):
        raise FormatError(f"{where}: dataset.format must be idx or raw-dir, got {value!r}")
    if name == "levels" and (not value or min(value) < 1):
        raise FormatError(f"{where}: model.levels needs positive multipliers")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise FormatError(f"{where}: expected 'key = value', got {body!r}")
        key, value = (p.strip() for p in body.split("=", 1))
        if key not in CONFIG_KEYS:
            raise FormatError(f"{where}: unknown key {key!r}")
        name, parse = CONFIG_KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as e:
            raise FormatError(f"{where}: bad value for {key}: {e}") from None
        _validate(name, parsed, where)
        values[name] = parsed
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Flag values win over config-file values; ``None`` means 'not given'."""
    known = {f.name for f in fields(RunConfig)}
    clean = {}
    for k, v in overrides.items():
        if k not in known:
            raise KeyError(f"unknown override {k!r}")
        if v is not None:
            _validate(k, v, "override")
            clean[k] = v
    return RunConfig(**{**asdict(cfg), **clean})
