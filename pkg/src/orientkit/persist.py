"""Flat ``key = value`` configuration files and binary checkpoints.

Checkpoint layout (all little-endian)::

    b"ORIENTKIT"  u32 version  u32 B  u32 K  u32 n_layers  u32 channels[n_layers]
    u32 epoch  u64 adam_step  u64 n_params  u32 meta_len  meta (UTF-8 JSON)
    f64 params[n_params]  f64 adam_m[n_params]  f64 adam_v[n_params]

``meta`` holds the config snapshot, the seed from which every random stream
is derived and the per-layer Adam step scales, so a resumed run is
deterministic.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .correlation import NetworkParams
from .signals import GridSpec
from .training import AdamState, ConfigError, TrainConfig

MAGIC = b"ORIENTKIT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


# ------------------------------------------------------------------- config


def _coerce(name: str, kind, raw: str):
    try:
        if name == "layer_channels":
            vals = tuple(int(x) for x in raw.replace(",", " ").split())
            if not vals:
                raise ValueError("empty list")
            return vals
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    return TrainConfig(**values).validate()


def read_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, val in cfg.to_dict().items():
        if isinstance(val, list):
            val = " ".join(str(v) for v in val)
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: NetworkParams
    adam: AdamState
    epoch: int
    config: TrainConfig
    lr_scale: tuple[float, ...] | None = None  # per-layer Adam step scale

    def to_bytes(self) -> bytes:
        p = self.params
        flat = p.flat()
        lr_scale = None if self.lr_scale is None else [float(x) for x in self.lr_scale]
        meta = json.dumps({"config": self.config.to_dict(), "rng": {"seed": self.config.seed},
                           "lr_scale": lr_scale}, sort_keys=True).encode()
        head = MAGIC + struct.pack("<IIII", VERSION, p.grid.bandwidth, p.grid.channels,
                                   len(p.channels))
        head += struct.pack(f"<{len(p.channels)}I", *p.channels)
        head += struct.pack("<IQQI", self.epoch, self.adam.step, flat.size, len(meta)) + meta
        body = b"".join(np.asarray(a, dtype="<f8").tobytes()
                        for a in (flat, self.adam.m, self.adam.v))
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        try:
            return cls._parse(memoryview(data))
        except (struct.error, ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc

    @classmethod
    def _parse(cls, buf) -> "Checkpoint":
        if bytes(buf[: len(MAGIC)]) != MAGIC:
            raise CheckpointError("not an orientkit checkpoint")
        pos = len(MAGIC)
        version, bw, k, n_layers = struct.unpack_from("<IIII", buf, pos)
        pos += 16
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        channels = struct.unpack_from(f"<{n_layers}I", buf, pos)
        pos += 4 * n_layers
        epoch, step, n_params, meta_len = struct.unpack_from("<IQQI", buf, pos)
        pos += 24
        meta = json.loads(bytes(buf[pos : pos + meta_len]).decode())
        pos += meta_len
        grid = GridSpec(bw, k)
        expected = NetworkParams(grid, channels).size
        if n_params != expected:
            raise CheckpointError(f"parameter count {n_params} does not match grid/channels ({expected})")
        if len(buf) - pos != 24 * n_params:
            raise CheckpointError("truncated parameter block")
        arrays = np.frombuffer(buf, dtype="<f8", count=3 * n_params, offset=pos).astype(np.float64)
        flat, m, v = arrays.reshape(3, n_params)
        cfg_dict = meta["config"]
        cfg_dict["layer_channels"] = tuple(cfg_dict["layer_channels"])
        cfg = TrainConfig(**cfg_dict)
        params = NetworkParams.from_flat(grid, channels, flat)
        lr_scale = meta.get("lr_scale")
        if lr_scale is not None:
            lr_scale = tuple(float(x) for x in lr_scale)
            if len(lr_scale) != n_layers:
                raise CheckpointError(f"expected {n_layers} layer step scales, got {len(lr_scale)}")
        return cls(params, AdamState(m.copy(), v.copy(), int(step)), int(epoch), cfg, lr_scale)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return Checkpoint.from_bytes(path.read_bytes(), str(path))
