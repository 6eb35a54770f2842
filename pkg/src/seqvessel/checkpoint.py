"""Bit-exact binary container for named float32 tensors.

Layout (all integers little-endian uint32):

    magic "SVSN" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE data

Round trips are bit-identical.  Integer metadata (epoch counters, seeds)
rides along as tensors of 16-bit limbs, each exactly representable in
float32.
"""

import struct

import numpy as np

MAGIC = b"SVSN"
VERSION = 1

_LIMBS = 4  # 4 x 16 bits covers any 64-bit non-negative integer


def encode_int(value: int) -> np.ndarray:
    value = int(value)
    if value < 0 or value >= 1 << (16 * _LIMBS):
        raise ValueError(f"cannot encode {value} in {_LIMBS} 16-bit limbs")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(_LIMBS)], dtype=np.float32)


def decode_int(limbs: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(limbs))


def save_tensors(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            if arr.ndim == 0:
                arr = arr.reshape(1)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "header") != MAGIC:
        raise ValueError("bad magic: not a checkpoint file")
    version = r.u32("header")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    count = r.u32("header")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("tensor name")
        name = r.take(name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise ValueError(f"duplicate tensor name {name!r}")
        rank = r.u32("tensor header")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims"))
        n = 1
        for d in dims:
            n *= d
        raw = r.take(4 * n, "tensor data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(data):
        raise ValueError(f"trailing bytes after last tensor: {len(data) - r.pos}")
    return tensors
