"""Checkpoints, config documents and FC3 locality heatmaps.

Checkpoint layout, all integers little-endian::

    magic        8 bytes  b"RMLPFRG1"
    version      u32      1
    mode         u32      0 = train, 1 = deploy
    config_len   u32
    config       config_len bytes of UTF-8 JSON (NetConfig fields)
    n_entries    u32
    entries      n_entries times:
                   name_len u32, name (UTF-8), dtype u8 (1 = f32),
                   rank u32, dims u32 * rank, offset u64
    payload      raw little-endian f32 tensors; entry offsets are relative
                 to the first payload byte
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from repmlp.block import DEPLOY, MODES, TRAIN
from repmlp.errors import ConfigurationError, FormatError
from repmlp.init import StateInit
from repmlp.net import NAMED_CONFIGS, NetConfig, Network, build_net
from repmlp.tensor import FcLayer

MAGIC = b"RMLPFRG1"
VERSION = 1
DTYPE_F32 = 1
_MODE_CODES = {TRAIN: 0, DEPLOY: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def write_checkpoint(path, mode: str, config: dict, arrays: Dict[str, np.ndarray]):
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    header = bytearray()
    header += MAGIC
    header += struct.pack("<III", VERSION, _MODE_CODES[mode], len(cfg_bytes))
    header += cfg_bytes
    header += struct.pack("<I", len(arrays))
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        header += struct.pack("<I", len(raw)) + raw
        header += struct.pack("<BI", DTYPE_F32, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(header)
        for blob in blobs:
            f.write(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Tuple[str, dict, Dict[str, np.ndarray]]:
    """Return ``(mode, config_dict, arrays)``; raise :class:`FormatError` on any defect."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a RepMLP checkpoint", 0)
    version, mode_code, cfg_len = r.unpack("<III", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", len(MAGIC))
    if mode_code not in _MODE_NAMES:
        raise FormatError(f"unknown mode flag {mode_code}", len(MAGIC) + 4)
    cfg_pos = r.pos
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable config document: {e}", cfg_pos) from None
    (count,) = r.unpack("<I", "entry count")
    entries = []
    for _ in range(count):
        entry_pos = r.pos
        (name_len,) = r.unpack("<I", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", entry_pos) from None
        dtype, rank = r.unpack("<BI", "entry dtype/rank")
        if dtype != DTYPE_F32:
            raise FormatError(f"entry {name!r} has unsupported dtype tag {dtype}", entry_pos)
        dims = r.unpack(f"<{rank}I", "entry dims")
        (offset,) = r.unpack("<Q", "entry offset")
        entries.append((name, dims, offset, entry_pos))
    payload = r.pos
    arrays = {}
    spans = []
    for name, dims, offset, entry_pos in entries:
        if name in arrays:
            raise FormatError(f"duplicate entry {name!r}", entry_pos)
        size = int(np.prod(dims, dtype=np.int64)) * 4
        start = payload + offset
        if start + size > len(data):
            raise FormatError(f"truncated payload for {name!r}", min(start, len(data)))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=start).astype(np.float32).reshape(dims)
        spans.append((offset, offset + size, name))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"entries {a!r} and {b!r} overlap", payload + start)
    return _MODE_NAMES[mode_code], config, arrays


def payload_nbytes(arrays) -> int:
    return sum(a.size * 4 for a in arrays.values())


def save_net(path, net: Network):
    write_checkpoint(path, net.mode, net.cfg.to_dict(), net.named_arrays())


def load_net(path, net: Optional[Network] = None) -> Network:
    """Load a checkpoint; if a skeleton ``net`` is given, mode and config must match it."""
    mode, config, arrays = read_checkpoint(path)
    cfg = NetConfig.from_dict(config)
    if net is not None:
        if net.mode != mode:
            raise ConfigurationError(
                f"checkpoint mode flag is {mode!r} but the target network is {net.mode!r}"
            )
        if net.cfg != cfg:
            raise ConfigurationError("checkpoint config does not match the target network")
    params = StateInit(arrays)
    loaded = build_net(cfg, mode=mode, params=params)
    params.check_consumed()
    return loaded


def load_config(source: str) -> NetConfig:
    """Resolve a preset name, a config file path or an inline config document.

    Documents are JSON objects or ``key = value`` lines (``:`` also works,
    ``#`` starts a comment) whose values are JSON literals.  A ``preset`` key
    starts from a named config and the remaining keys override it.
    """
    if source.upper() in NAMED_CONFIGS:
        return NAMED_CONFIGS[source.upper()]
    path = Path(source)
    if path.is_file():
        return parse_config(path.read_text())
    if not any(ch in source for ch in "{=:\n"):
        raise ConfigurationError(f"{source!r} is neither a preset ({', '.join(NAMED_CONFIGS)}) nor a config file")
    return parse_config(source)


def parse_config(text: str) -> NetConfig:
    text = text.strip()
    if text.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"bad JSON config: {e}") from None
    else:
        doc = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            if sep not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split(sep, 1))
            try:
                doc[key] = json.loads(value)
            except json.JSONDecodeError:
                doc[key] = value
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a mapping")
    preset = doc.pop("preset", None)
    if preset is None:
        return NetConfig.from_dict(doc)
    base = NAMED_CONFIGS.get(str(preset).upper())
    if base is None:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(NAMED_CONFIGS)}")
    NetConfig.from_dict(base.to_dict() | doc)  # rejects unknown keys
    return base.replace(**doc)


LOG_GUARD = 1e-12


@dataclass
class Heatmap:
    raw: np.ndarray  # signed kernel weights, (h, w)
    log: np.ndarray  # ln(|v| / m) with zeros guarded
    min_abs: float  # m, the smallest non-zero |entry| of the whole kernel


def locality_heatmap(fc3, s: int, h: int, w: int, set_idx: int, out_pos: Tuple[int, int]) -> Heatmap:
    """Input-position weights feeding output point ``out_pos`` of share-set ``set_idx``.

    The ``(s*h*w, h*w)`` kernel is viewed as ``(s, h, w, 1, h, w)``; indices are
    0-based.
    """
    weight = fc3.weight if isinstance(fc3, FcLayer) else np.asarray(fc3, dtype=np.float32)
    if weight.shape != (s * h * w, h * w):
        raise ConfigurationError(f"expected kernel shape {(s * h * w, h * w)}, got {weight.shape}")
    i, j = out_pos
    if not (0 <= set_idx < s and 0 <= i < h and 0 <= j < w):
        raise IndexError(f"set {set_idx} / position {(i, j)} outside (s={s}, h={h}, w={w})")
    raw = weight.reshape(s, h, w, 1, h, w)[set_idx, i, j, 0].copy()
    nonzero = np.abs(weight[weight != 0])
    m = float(nonzero.min()) if nonzero.size else 1.0
    log = np.log(np.maximum(np.abs(raw).astype(np.float64), m * LOG_GUARD) / m)
    return Heatmap(raw, log, m)


def write_pgm(path, grid: np.ndarray):
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros(grid.shape) if hi == lo else (grid - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def export_locality_heatmap(fc3, s, h, w, set_idx, out_pos, path) -> Heatmap:
    """Write ``<path>.csv`` (row-major log values) and ``<path>.pgm``."""
    heat = locality_heatmap(fc3, s, h, w, set_idx, out_pos)
    base = Path(path)
    if base.suffix in (".csv", ".pgm"):
        base = base.with_suffix("")
    np.savetxt(base.with_suffix(".csv"), heat.log, delimiter=",", fmt="%.6g")
    write_pgm(base.with_suffix(".pgm"), heat.log)
    return heat
