"""On-disk formats: datasets (LPDE), checkpoints (LPCK) and flat run configs.

All multi-byte fields are little-endian. Every write goes to a temporary file
in the target directory and is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import FieldSample


class FormatError(ValueError):
    """A file that does not parse; the message names the file and byte offset."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False).encode("utf-8")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"LPDE"
DATASET_VERSION = 1
_LAYOUTS = {"grid": 0, "mesh": 1}
# magic, version, layout, precision, count, T, D, C, M
_DS_HEAD = struct.Struct("<4sHBBIIHHI")


@dataclass
class Dataset:
    """In-memory dataset: grids (T, *spatial, C) float32 or mesh FieldSamples."""

    layout: str
    samples: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.layout not in _LAYOUTS:
            raise ValueError(f"layout must be 'grid' or 'mesh', got {self.layout!r}")
        if not self.samples:
            raise ValueError("dataset needs at least one sample")

    def __len__(self):
        return len(self.samples)

    def split(self, name: str) -> list[int]:
        tags = self.meta.get("split", ["train"] * len(self))
        return [i for i, s in enumerate(tags) if s == name]

    @property
    def captions(self) -> list[str]:
        return self.meta.get("captions", [])

    def grids(self, idx=None) -> np.ndarray:
        if self.layout != "grid":
            raise ValueError("grid access on a mesh dataset")
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.samples[i] for i in idx])


def _dims(ds: Dataset):
    s0 = ds.samples[0]
    if ds.layout == "grid":
        T, *spatial, C = s0.shape
        return T, spatial, C, int(np.prod(spatial))
    return s0.n_times, [0] * s0.spatial_dim, s0.n_channels, s0.n_points


def _chunk_size(layout, T, D, C, M) -> int:
    n = T * M * C
    if layout == "mesh":
        n += T + M * D
    return 4 * n


def dataset_bytes(ds: Dataset) -> bytes:
    T, spatial, C, M = _dims(ds)
    D = len(spatial)
    head = _DS_HEAD.pack(DATASET_MAGIC, DATASET_VERSION, _LAYOUTS[ds.layout], 0, len(ds), T, D, C, M)
    head += struct.pack(f"<{D}I", *spatial)
    head += struct.pack("<I", zlib.crc32(head))
    parts = [head]
    expect = _chunk_size(ds.layout, T, D, C, M)
    for i, s in enumerate(ds.samples):
        if ds.layout == "grid":
            if tuple(s.shape) != (T, *spatial, C):
                raise ValueError(f"sample {i} has shape {s.shape}, expected {(T, *spatial, C)}")
            payload = np.ascontiguousarray(s, dtype="<f4").tobytes()
        else:
            if (s.n_times, s.n_points, s.spatial_dim, s.n_channels) != (T, M, D, C):
                raise ValueError(f"mesh sample {i} does not match the first sample's dims")
            payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (s.times, s.points, s.values))
        assert len(payload) == expect
        parts.append(struct.pack("<I", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def write_dataset(path, ds: Dataset) -> None:
    meta = dict(ds.meta)
    meta.setdefault("count", len(ds))
    atomic_write(path, dataset_bytes(ds))
    atomic_write(str(path) + ".json", _json_bytes(meta))


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read ({e})") from e
    if len(buf) < _DS_HEAD.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes, offset 0)")
    magic, version, layout_id, prec, count, T, D, C, M = _DS_HEAD.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at offset 4 (reader knows {DATASET_VERSION})")
    off = _DS_HEAD.size
    if len(buf) < off + 4 * D + 4:
        raise FormatError(f"{path}: truncated header at offset {off}")
    spatial = list(struct.unpack_from(f"<{D}I", buf, off))
    off += 4 * D
    (crc,) = struct.unpack_from("<I", buf, off)
    if crc != zlib.crc32(buf[:off]):
        raise FormatError(f"{path}: header checksum mismatch at offset {off}; header is corrupted")
    off += 4
    layout = {v: k for k, v in _LAYOUTS.items()}.get(layout_id)
    if layout is None or prec != 0:
        raise FormatError(f"{path}: unknown layout/precision flags ({layout_id}, {prec}) at offset 6")
    if layout == "grid" and int(np.prod(spatial)) != M:
        raise FormatError(f"{path}: grid extents {spatial} inconsistent with point count {M}")
    expect = _chunk_size(layout, T, D, C, M)
    # validate all chunk lengths before decoding anything
    pos, offsets = off, []
    for i in range(count):
        if pos + 4 > len(buf):
            raise FormatError(f"{path}: missing chunk {i} at offset {pos}")
        (n,) = struct.unpack_from("<I", buf, pos)
        if n != expect or pos + 4 + n > len(buf):
            raise FormatError(f"{path}: chunk {i} at offset {pos} has {n} bytes, header implies {expect}")
        offsets.append(pos + 4)
        pos += 4 + n
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at offset {pos}")
    samples = []
    for start in offsets:
        arr = np.frombuffer(buf, dtype="<f4", count=expect // 4, offset=start)
        if layout == "grid":
            samples.append(arr.reshape(T, *spatial, C).astype(np.float32))
        else:
            times = arr[:T].astype(np.float64)
            pts = arr[T: T + M * D].reshape(M, D).astype(np.float64)
            vals = arr[T + M * D:].reshape(T, M, C).astype(np.float32)
            samples.append(FieldSample(times, pts, vals))
    meta = {}
    side = Path(str(path) + ".json")
    if side.exists():
        try:
            meta = json.loads(side.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{side}: invalid metadata at offset {e.pos}: {e.msg}") from e
    chans = tuple(meta.get("channels", ()))
    if layout == "mesh" and chans:
        samples = [FieldSample(s.times, s.points, s.values, chans) for s in samples]
    return Dataset(layout, samples, meta)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LPCK"
CKPT_VERSION = 1
_CK_HEAD = struct.Struct("<4sHII")  # magic, version, header length, header crc
_DTYPES = {torch.float32: "f4", torch.float64: "f8", torch.int64: "i8", torch.int32: "i4", torch.bool: "b1",
           torch.float16: "f2", torch.uint8: "u1"}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, torch.Tensor]"
    meta: dict = field(default_factory=dict)  # config, scale, schedule, seed, step, ...

    def to_bytes(self) -> bytes:
        table, blobs, off = [], [], 0
        for name, t in self.tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise ValueError(f"tensor {name}: unsupported dtype {t.dtype}")
            raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
            table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": off,
                          "nbytes": len(raw)})
            blobs.append(raw)
            off += len(raw)
        header = _json_bytes({"tensors": table, "meta": self.meta})
        return _CK_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header), zlib.crc32(header)) + header + b"".join(blobs)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as e:
            raise FormatError(f"{path}: cannot read ({e})") from e
        if len(buf) < _CK_HEAD.size:
            raise FormatError(f"{path}: truncated header at offset 0")
        magic, version, hlen, crc = _CK_HEAD.unpack_from(buf, 0)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {CKPT_MAGIC!r}")
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version} at offset 4")
        start = _CK_HEAD.size
        raw = buf[start: start + hlen]
        if len(raw) != hlen or zlib.crc32(raw) != crc:
            raise FormatError(f"{path}: header checksum mismatch at offset {start}; header is corrupted")
        try:
            head = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable header at offset {start}: {e}") from e
        base = start + hlen
        tensors = OrderedDict()
        for ent in head["tensors"]:
            lo = base + ent["offset"]
            if lo + ent["nbytes"] > len(buf):
                raise FormatError(f"{path}: tensor {ent['name']} runs past end of file (offset {lo})")
            arr = np.frombuffer(buf, dtype="<" + ent["dtype"] if ent["dtype"] != "b1" else "?",
                                count=int(np.prod(ent["shape"], dtype=np.int64)), offset=lo)
            tensors[ent["name"]] = torch.from_numpy(arr.reshape(ent["shape"]).copy()).to(_DTYPES_INV[ent["dtype"]])
        end = base + sum(e["nbytes"] for e in head["tensors"])
        if end != len(buf):
            raise FormatError(f"{path}: {len(buf) - end} unexpected bytes at offset {end}")
        return cls(tensors, head["meta"])

    def require(self, *keys) -> None:
        missing = [k for k in keys if k not in self.meta]
        if missing:
            raise FormatError(f"checkpoint lacks fields {missing}")


def module_tensors(prefix: str, module: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((f"{prefix}.{k}", v) for k, v in module.state_dict().items())


def load_module(prefix: str, module: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = {k[len(prefix) + 1:]: v for k, v in ckpt.tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(state)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bools(s: str) -> tuple:
    return tuple(_bool(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# key -> (parser, default)
CONFIG_KEYS: dict[str, tuple] = {
    "seed": (int, 0),
    "precision": (int, 32),
    # data
    "resolution": (int, 32),
    "n_steps": (int, 24),
    "dt": (float, 1.0),
    "nu": (float, 0.01),
    "buoyancy_range": (_floats, (0.1, 0.25)),
    "plume_count_range": (_ints, (1, 4)),
    "warmup": (int, 8),
    "n_train": (int, 64),
    "n_val": (int, 16),
    "layout": (str, "grid"),
    "mesh_points": (int, 2048),
    # transcoder / autoencoder
    "radius": (float, 0.075),
    "decoder_radius": (float, 0.05),
    "decoder_steps": (int, 60),
    "weight_mode": (str, "equal"),
    "latent_channels": (int, 4),
    "ae_widths": (_ints, (16, 32, 48)),
    "ae_temporal_down": (_bools, (True, True)),
    "ae_res_blocks": (_ints, (0, 0)),
    "factor": (int, 2),
    "kl_weight": (float, 2e-7),
    "ae_steps": (int, 2000),
    "ae_lr": (float, 2e-3),
    "ae_batch_size": (int, 2),
    "batch_size": (int, 8),
    # diffusion
    "diffusion_steps": (int, 1000),
    "schedule": (str, "linear"),
    "param": (str, "eps"),
    "learn_sigma": (_bool, False),
    "backbone": (str, "dit"),
    "dit_hidden": (int, 128),
    "dit_depth": (int, 4),
    "dit_heads": (int, 4),
    "patch_t": (int, 1),
    "patch_s": (int, 2),
    "cond_dim": (int, 64),
    "modality": (str, "first-frame"),
    "text_max_len": (int, 64),
    "cfg_weight": (float, 0.0),
    "cfg_rescale": (float, 0.7),
    "cfg_p_uncond": (float, 0.0),
    "ldm_steps": (int, 3000),
    "ldm_lr": (float, 1e-3),
    # sampling / rollout
    "sampler": (str, "ddpm"),
    "sample_steps": (int, 1000),
    "eta": (float, 0.0),
    "windows": (int, 1),
}

_CHOICES = {
    "layout": ("grid", "mesh"),
    "weight_mode": ("equal", "density", "monte_carlo"),
    "schedule": ("linear", "cosine"),
    "param": ("eps", "v"),
    "backbone": ("dit", "unet"),
    "modality": ("first-frame", "text", "both"),
    "sampler": ("ddpm", "ddim"),
    "precision": (32, 64),
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Flat ``key = value`` configuration with typed defaults; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self.values = {k: d for k, (_, d) in CONFIG_KEYS.items()}
        self.sources = {k: "default" for k in CONFIG_KEYS}
        if values:
            self.update(values, "arg")

    def update(self, values: dict, source: str = "flag") -> "RunConfig":
        for key, raw in values.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            parse = CONFIG_KEYS[key][0]
            try:
                val = parse(raw) if isinstance(raw, str) else (tuple(raw) if isinstance(raw, list) else raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
            if key in _CHOICES and val not in _CHOICES[key]:
                raise ConfigError(f"{key} must be one of {_CHOICES[key]}, got {val!r}")
            self.values[key] = val
            self.sources[key] = source
        return self

    @staticmethod
    def parse_text(text: str, origin: str = "<text>") -> dict:
        out = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{ln}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in out:
                raise ConfigError(f"{origin}:{ln}: duplicate key {k!r}")
            out[k] = v
        return out

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then the file, then command-line overrides."""
        cfg = cls()
        if path is not None:
            cfg.update(cls.parse_text(Path(path).read_text(encoding="utf-8"), str(path)), "file")
        if overrides:
            cfg.update(overrides, "flag")
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        vals = self.__dict__.get("values")
        if vals is not None and key in vals:
            return vals[key]
        raise AttributeError(key)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def echo(self) -> str:
        w = max(len(k) for k in self.values)
        return "".join(f"{k.ljust(w)} = {_fmt(v)}  ({self.sources[k]})\n" for k, v in self.values.items())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def save(self, path) -> None:
        atomic_write(path, self.to_text().encode("utf-8"))
