"""Chunked binary checkpoint files.

Layout: magic ``MENETCKPT``, uint32 version, a ``key = value`` UTF-8
config block, then one record per tensor: name, dtype code, shape and
raw little-endian values. Tensors round-trip byte-exactly. Writes go
through a temp file and an atomic rename so a crash never leaves a
corrupt checkpoint behind.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, IoFailure, TruncatedFile, UnsupportedDatatype
from .model import MENetConfig, ModelParams

MAGIC = b"MENETCKPT"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float64): 1,
    np.dtype(np.float32): 2,
    np.dtype(np.int64): 3,
    np.dtype(np.uint8): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_CONFIG_INT_KEYS = ("num_stages", "base_channels", "num_modalities", "num_classes")


def format_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise IoFailure(f"bad config line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_to_kv(config: MENetConfig) -> dict[str, str]:
    return {
        "num_stages": str(config.num_stages),
        "base_channels": str(config.base_channels),
        "num_modalities": str(config.num_modalities),
        "num_classes": str(config.num_classes),
        "convs_per_encoder_stage": ",".join(map(str, config.convs_per_encoder_stage)),
        "convs_per_decoder_stage": ",".join(map(str, config.convs_per_decoder_stage)),
        "dropout_rate": repr(config.dropout_rate),
    }


def config_from_kv(kv: dict[str, str]) -> MENetConfig:
    kwargs = {}
    for key in _CONFIG_INT_KEYS:
        if key in kv:
            kwargs[key] = int(kv[key])
    for key in ("convs_per_encoder_stage", "convs_per_decoder_stage"):
        if key in kv and kv[key]:
            kwargs[key] = tuple(int(x) for x in kv[key].split(","))
    if "dropout_rate" in kv:
        kwargs["dropout_rate"] = float(kv["dropout_rate"])
    return MENetConfig(**kwargs)


def save_checkpoint(path, config: MENetConfig, tensors: dict[str, np.ndarray],
                    meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    kv = config_to_kv(config)
    for key, value in (meta or {}).items():
        if "\n" in value:
            raise IoFailure(f"meta value for {key!r} must be single-line")
        kv[f"meta.{key}"] = value
    config_blob = format_kv(kv).encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", VERSION),
              struct.pack("<I", len(config_blob)), config_blob,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise UnsupportedDatatype(f"checkpoint cannot hold dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C"))

    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e


class _Cursor:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFile(f"{self.path}: checkpoint ends early")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[MENetConfig, dict[str, np.ndarray], dict[str, str]]:
    """Returns (config, tensors, meta)."""
    path = Path(path)
    try:
        cur = _Cursor(path.read_bytes(), path)
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    if cur.take(len(MAGIC)) != MAGIC:
        raise BadMagic(f"{path}: not a MENETCKPT file")
    (version,) = cur.unpack("<I")
    if version != VERSION:
        raise BadMagic(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = cur.unpack("<I")
    kv = parse_kv(cur.take(config_len).decode("utf-8"))
    meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}
    config = config_from_kv({k: v for k, v in kv.items() if not k.startswith("meta.")})
    (count,) = cur.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        code, ndim = cur.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise UnsupportedDatatype(f"{path}: dtype code {code}")
        shape = cur.unpack(f"<{ndim}I")
        dt = _CODE_DTYPES[code].newbyteorder("<")
        raw = cur.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        arr = np.frombuffer(raw, dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    return config, tensors, meta


def save_model(path, params: ModelParams, meta: dict[str, str] | None = None) -> None:
    save_checkpoint(path, params.config, params.tensors, meta)


def load_model(path) -> tuple[ModelParams, dict[str, str]]:
    config, tensors, meta = load_checkpoint(path)
    return ModelParams(config, tensors), meta
