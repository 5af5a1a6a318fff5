"""Binary tensor container used for model weights, PLDA models, head
parameters and dumped feature batches.

Layout: magic ``WSTN``, version u32, tensor count u32; then per tensor a
u16 name length, the UTF-8 name, a u8 rank, u32 dims, and the row-major
float32 payload. All integers and floats are little-endian.
"""

import struct

import numpy as np

MAGIC = b"WSTN"
VERSION = 1


class TensorFormatError(Exception):
    """Raised when a container file is malformed."""


def write_tensors(path, tensors: dict) -> None:
    """Write an ordered ``name -> array`` mapping; arrays are cast to f32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise TensorFormatError(f"tensor name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated container while reading {what}")
    return buf


def read_tensors(path) -> dict:
    """Read a container back into an ordered ``name -> float32 array`` dict."""
    out: dict = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise TensorFormatError(f"{path}: bad magic, not a tensor container")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise TensorFormatError(f"{path}: unsupported version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}")
            )
            n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * n_items, f"payload of {name}")
            if name in out:
                raise TensorFormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
