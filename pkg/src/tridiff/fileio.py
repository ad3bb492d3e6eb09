"""On-disk formats: weight checkpoints and PGM/PPM images.

Checkpoint layout (documented contract, stable across versions):

    TRIDIFF-CKPT 1\n
    meta <key> <value>\n          (zero or more)
    dtype <float64|float32>\n
    array <name> <d0> <d1> ...\n  (one per array, in storage order)
    DATA\n
    <raw little-endian array bytes, concatenated in header order>

The header is ASCII; everything after the DATA line is binary.
"""

from __future__ import annotations

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "write_pgm", "write_ppm"]

_MAGIC = "TRIDIFF-CKPT 1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    names = list(arrays.keys())
    dtypes = {np.asarray(arrays[n]).dtype for n in names}
    dtype = np.dtype(np.float64) if len(dtypes) != 1 else dtypes.pop()
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        dtype = np.dtype(np.float64)
    lines = [_MAGIC]
    for key, value in (meta or {}).items():
        svalue = str(value)
        if any(ch.isspace() for ch in str(key)) or "\n" in svalue:
            raise ValueError(f"checkpoint meta entry {key!r} has unsupported characters")
        lines.append(f"meta {key} {svalue}")
    lines.append(f"dtype {dtype.name}")
    for name in names:
        arr = np.asarray(arrays[name])
        if any(ch.isspace() for ch in name):
            raise ValueError(f"array name {name!r} may not contain whitespace")
        lines.append(f"array {name} " + " ".join(str(d) for d in arr.shape))
    lines.append("DATA")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in names:
            arr = np.ascontiguousarray(np.asarray(arrays[name]), dtype=dtype)
            fh.write(arr.astype(dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"DATA\n"
    pos = blob.find(marker)
    if pos < 0:
        raise ValueError(f"{path}: not a checkpoint file (missing DATA marker)")
    header = blob[:pos].decode("ascii").splitlines()
    payload = blob[pos + len(marker):]
    if not header or header[0] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    meta: dict[str, str] = {}
    dtype = None
    specs = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "dtype":
            dtype = np.dtype(rest).newbyteorder("<")
        elif kind == "array":
            fields = rest.split(" ")
            specs.append((fields[0], tuple(int(d) for d in fields[1:])))
        else:
            raise ValueError(f"{path}: unknown header line {line!r}")
    if dtype is None:
        raise ValueError(f"{path}: header missing dtype")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated data for array {name}")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes after arrays")
    return arrays, meta


def _to_bytes(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Binary PGM (P5) with values rescaled from [lo, hi] to 0..255."""
    img = np.atleast_2d(image)
    if img.ndim != 2:
        raise ValueError(f"write_pgm: need a 2D image, got shape {img.shape}")
    data = _to_bytes(img, lo, hi)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, image: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Binary PPM (P6) for (H, W, 3) images rescaled from [lo, hi]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm: need an (H, W, 3) image, got shape {img.shape}")
    data = _to_bytes(img, lo, hi)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
