"""On-disk formats: field batches, training checkpoints and run configurations.

Field batch ("FGB1"), little-endian throughout::

    magic "FGB1" | version u16 = 1 | dtype u8 (1 = f64) | reserved u8
    count u32 | nx u16 | ny u16 | lx f64 | ly f64        (32 bytes)
    count * ny * nx f64 values, fields concatenated, each row-major

Checkpoint ("FCK1")::

    magic "FCK1" | version u16 = 1 | reserved u16 | meta_len u32
    meta: UTF-8 JSON (model and noise configs, grid, step counters, seeds)
    tensor_count u32, then per tensor:
        name_len u16 | name | ndim u8 | dims u32 * ndim | f64 values

Parameters come first in declared order, then Adam moments named
``m/<param>`` and ``v/<param>``.  All randomness is keyed by (seed, step), so
the seeds in the metadata are the whole random state.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .fno import FnoConfig, param_shapes
from .grf import KernelSpec
from .grid import Field, GridSpec
from .train import OptState

FGB_MAGIC = b"FGB1"
FGB_VERSION = 1
FGB_HEADER = struct.Struct("<4sHBBIHHdd")  # 32 bytes; grid sides up to 65535
DTYPE_F64 = 1

FCK_MAGIC = b"FCK1"
FCK_VERSION = 1
FCK_HEADER = struct.Struct("<4sHHI")


class FormatError(ValueError):
    pass


# --- field batches -----------------------------------------------------------

def write_fields(path, f: Field):
    if max(f.grid.nx, f.grid.ny) > 0xFFFF:
        raise FormatError("grid sides above 65535 do not fit the header")
    values = f.values if f.values.ndim == 3 else f.values[None]
    header = FGB_HEADER.pack(FGB_MAGIC, FGB_VERSION, DTYPE_F64, 0, len(values), f.grid.nx, f.grid.ny,
                             f.grid.lx, f.grid.ly)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_fields(path) -> Field:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < FGB_HEADER.size:
        raise FormatError(f"{path}: file shorter than the {FGB_HEADER.size}-byte header")
    magic, version, dtype, _, count, nx, ny, lx, ly = FGB_HEADER.unpack_from(raw)
    if magic != FGB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FGB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    expected = FGB_HEADER.size + 8 * count * nx * ny
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} != {expected} for {count} fields of {nx}x{ny}")
    values = np.frombuffer(raw, dtype="<f8", offset=FGB_HEADER.size).reshape(count, ny, nx)
    return Field(GridSpec(nx, ny, lx, ly), values.astype(np.float64))


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    fno: FnoConfig
    kernel: KernelSpec
    grid: GridSpec
    params: dict[str, np.ndarray]
    opt_state: OptState | None
    seed: int  # trainer seed: init, shuffling and time streams
    noise_seed: int
    epoch: int = 0
    extra: dict | None = None


def _pack_tensor(name: str, a: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(path, ck: Checkpoint):
    meta = {
        "fno": asdict(ck.fno),
        "kernel": asdict(ck.kernel),
        "grid": asdict(ck.grid),
        "seed": ck.seed,
        "noise_seed": ck.noise_seed,
        "epoch": ck.epoch,
        "step": ck.opt_state.step if ck.opt_state else None,
        "total_steps": ck.opt_state.total_steps if ck.opt_state else None,
        "extra": ck.extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    order = list(param_shapes(ck.fno))
    if set(order) != set(ck.params):
        raise FormatError("parameter names do not match the model configuration")
    tensors = [(k, ck.params[k]) for k in order]
    if ck.opt_state is not None:
        tensors += [(f"m/{k}", ck.opt_state.m[k]) for k in order]
        tensors += [(f"v/{k}", ck.opt_state.v[k]) for k in order]
    with open(path, "wb") as fh:
        fh.write(FCK_HEADER.pack(FCK_MAGIC, FCK_VERSION, 0, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, a in tensors:
            fh.write(_pack_tensor(name, np.asarray(a, dtype=np.float64)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < FCK_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, _, meta_len = FCK_HEADER.unpack_from(raw)
    if magic != FCK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FCK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = FCK_HEADER.size
    meta = json.loads(raw[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    fno = FnoConfig(**meta["fno"])
    order = list(param_shapes(fno))
    try:
        params = {k: tensors[k] for k in order}
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from None
    opt = None
    if meta["step"] is not None:
        opt = OptState({k: tensors[f"m/{k}"] for k in order}, {k: tensors[f"v/{k}"] for k in order},
                       int(meta["step"]), int(meta["total_steps"]))
    return Checkpoint(fno, KernelSpec(**meta["kernel"]), GridSpec(**meta["grid"]), params, opt,
                      int(meta["seed"]), int(meta["noise_seed"]), int(meta["epoch"]), meta["extra"])


# --- run configuration -------------------------------------------------------

class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    grid_nx: int | None = None
    grid_ny: int | None = None
    grid_lx: float = 2 * math.pi
    grid_ly: float = 2 * math.pi
    kernel_nu: float = KernelSpec.nu
    kernel_length_scale: float = KernelSpec.length_scale
    kernel_variance: float = KernelSpec.variance
    fno_layers: int = FnoConfig.n_layers
    fno_modes: int = FnoConfig.modes
    fno_width: int = FnoConfig.width
    fno_lift: int = FnoConfig.lift_dim
    fno_proj: int = FnoConfig.proj_dim
    train_batch: int = 128
    train_epochs: int = 500
    train_lr: float = 1e-4
    train_warmup_frac: float = 0.10
    train_min_lr: float = 1e-6
    train_coupling: str = "ot"
    train_sigma_min: float = 0.0
    train_seed: int = 0
    sample_scheme: str = "euler"
    sample_steps: int = 5
    datagen_re: float = 40.0
    datagen_n_forcing: int = 4
    datagen_dt: float = 1e-3
    datagen_snapshots: int = 100
    # extensions beyond the core key set
    datagen_kind: str = "kolmogorov"  # or "grf"
    datagen_trajectories: int = 1
    datagen_spinup: float = 50.0
    datagen_interval: float = 1.0
    train_checkpoint_every: int = 0
    train_per_sample_t: bool = False
    train_precision: str = "float64"  # model compute precision: float64 or float32

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name.replace("_", ".", 1) for f in fields(cls)]

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            attr = key.replace(".", "_", 1)
            if attr not in types or "." not in key:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if attr in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[attr] = _convert(key, value, types[attr])
        return cls(**values)

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name.replace('_', '.', 1)}={v}")
        return "\n".join(lines) + "\n"

    def require(self, *attrs: str):
        for a in attrs:
            if getattr(self, a) is None:
                raise ConfigError(f"missing required key {a.replace('_', '.', 1)}")

    def grid(self) -> GridSpec:
        self.require("grid_nx", "grid_ny")
        return GridSpec(self.grid_nx, self.grid_ny, self.grid_lx, self.grid_ly)

    def kernel(self) -> KernelSpec:
        return KernelSpec(self.kernel_nu, self.kernel_length_scale, self.kernel_variance)

    def fno(self) -> FnoConfig:
        return FnoConfig(self.fno_layers, self.fno_modes, self.fno_width, self.fno_lift, self.fno_proj)


def _convert(key: str, value: str, typ: str):
    try:
        if "bool" in typ:
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
