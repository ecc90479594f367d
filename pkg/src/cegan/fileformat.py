"""Binary containers for datasets, GAN checkpoints and trained models.

All integers and floats are little-endian.

Tensor container (checkpoints, magic ``CEGANCKPT\\0``; models, ``CEGANMODEL``)::

    magic[10] version:u16 class_id:u16 json_len:u32 json[json_len]
    count:u32 { name_len:u16 name[name_len] rank:u8 extents:u32*rank data:f32* }*count

Dataset file (magic ``CEGANDATA\\0``)::

    magic[10] version:u16 N:u32 C:u8 H:u16 W:u16 K:u8 { len:u16 utf8[len] }*K
    { pixels:f32*(C*H*W) labels:u8*K }*N
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"CEGANCKPT\0"
MODEL_MAGIC = b"CEGANMODEL"
DATA_MAGIC = b"CEGANDATA\0"
VERSION = 1


class FormatError(ValueError):
    """File is not a valid container of the expected kind."""


def atomic_write(path: str | Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read {path}: {e.strerror}") from e


# ---------------------------------------------------------------- tensors

def write_tensor_file(path, magic: bytes, class_id: int, meta: dict,
                      tensors: dict[str, np.ndarray]):
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<HHI", VERSION, class_id, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_tensor_file(path, magic: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    r = _Reader(_read_bytes(path), str(path))
    if r.take(len(magic)) != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    version, class_id, blob_len = r.unpack("HHI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        meta = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt metadata: {e}") from e
    tensors = {}
    for _ in range(r.unpack("I")):
        try:
            name = r.take(r.unpack("H")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: tensor name is not UTF-8") from e
        rank = r.unpack("B")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return class_id, meta, tensors


# ---------------------------------------------------------------- datasets

def _record_dtype(chw: int, k: int) -> np.dtype:
    return np.dtype([("px", "<f4", (chw,)), ("lab", "u1", (k,))])


def dataset_header(n: int, c: int, h: int, w: int, names: list[str]) -> bytes:
    head = [DATA_MAGIC, struct.pack("<HIBHHB", VERSION, n, c, h, w, len(names))]
    for name in names:
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(head)


def write_dataset_file(path, images: np.ndarray, labels: np.ndarray, names: list[str]):
    n, c, h, w = images.shape
    rec = np.empty(n, dtype=_record_dtype(c * h * w, len(names)))
    rec["px"] = images.reshape(n, -1)
    rec["lab"] = labels
    atomic_write(path, dataset_header(n, c, h, w, names) + rec.tobytes())


def read_dataset_file(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    r = _Reader(_read_bytes(path), str(path))
    if r.take(len(DATA_MAGIC)) != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {DATA_MAGIC!r}")
    version, n, c, h, w, k = r.unpack("HIBHHB")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        names = [r.take(r.unpack("H")).decode("utf-8") for _ in range(k)]
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: attribute name is not UTF-8") from e
    dt = _record_dtype(c * h * w, k)
    body = r.take(n * dt.itemsize)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    rec = np.frombuffer(body, dtype=dt)
    images = rec["px"].reshape(n, c, h, w).astype(np.float32)
    labels = rec["lab"].copy()
    if not np.all(labels <= 1):
        raise FormatError(f"{path}: label bytes must be 0 or 1")
    return images, labels, names
