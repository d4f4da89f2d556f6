"""Model checkpoints.

Layout (little-endian)::

    b"EKGC"
    u32 config length | UTF-8 ``key=value`` lines
    u32 section count
    per section: u16 name length | UTF-8 name | tensor record ("EKGT" ...)
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError, LoadError
from .tensor import read_tensor, write_tensor

CHECKPOINT_MAGIC = b"EKGC"


def format_config(config: dict) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def parse_config_block(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    text = format_config(config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor(fh, np.asarray(arr))


def _read(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint")
    return buf


def load_checkpoint(path, expect: dict | None = None):
    """Return ``(config, tensors)``; raise :class:`LoadError` when any key in
    ``expect`` disagrees with the stored configuration."""
    with open(path, "rb") as fh:
        if _read(fh, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<I", _read(fh, 4))
        config = parse_config_block(_read(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, ln).decode("utf-8")
            tensors[name] = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last section")
    if expect:
        bad = [f"{k}: checkpoint has {config.get(k)!r}, requested {str(v)!r}"
               for k, v in expect.items() if config.get(k) != str(v)]
        if bad:
            raise LoadError("checkpoint/config mismatch: " + "; ".join(bad))
    return config, tensors
