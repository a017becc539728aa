"""Binary tensor container, checkpoints and plain-text configs.

FTEN layout (little-endian)::

    b"FTEN" | u8 rank | rank x u64 extents | float64 payload, row-major

Checkpoints are a concatenation of FTEN records plus a JSON manifest that maps
parameter names to byte offsets.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping

import numpy as np

MAGIC = b"FTEN"


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> int:
    """Write one FTEN record; returns the number of bytes written."""
    a = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    if a.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    fh.write(header)
    fh.write(a.tobytes(order="C"))
    return len(header) + a.nbytes


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read the next FTEN record, or ``None`` at a clean end of stream."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise FormatError("truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def iter_tensors(path) -> Iterator[np.ndarray]:
    with open(path, "rb") as fh:
        while (a := read_tensor(fh)) is not None:
            yield a


def dumps(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def loads(blob: bytes) -> np.ndarray:
    a = read_tensor(io.BytesIO(blob))
    if a is None:
        raise FormatError("empty buffer")
    return a


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write ``<path>`` (FTEN records) and ``<path>.json`` (name -> offset manifest)."""
    path = Path(path)
    entries = {}
    with open(path, "wb") as fh:
        offset = 0
        for name in sorted(params):
            value = np.asarray(params[name], dtype=np.float64)
            entries[name] = {"offset": offset, "shape": list(value.shape)}
            offset += write_tensor(fh, value)
    manifest = {"format": "FTEN", "tensors": entries, "meta": dict(meta or {})}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    out = {}
    with open(path, "rb") as fh:
        for name, entry in manifest["tensors"].items():
            fh.seek(entry["offset"])
            out[name] = read_tensor(fh)
    return out, manifest.get("meta", {})


def _coerce(value: str):
    low = value.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value.strip()


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = _coerce(value)
    return out


def write_config(path, values: Mapping) -> None:
    lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")
