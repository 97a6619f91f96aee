"""Binary tensor files for checkpoints and episodes.

Layout: magic string, then per tensor: name length (u64 LE), name bytes,
rank (u64 LE), extents (u64 LE each), values (f32 LE, row-major). The same
framing carries model checkpoints ("VTAMCKPT1") and episodes ("VTAMEPS1").
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"VTAMCKPT1"
EPISODE_MAGIC = b"VTAMEPS1"


def save_tensors(path, tensors, magic=CKPT_MAGIC):
    """Write named arrays to `path`. Insertion order is preserved on disk."""
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            for name, arr in tensors.items():
                arr = np.ascontiguousarray(arr, dtype=np.float32)
                nb = name.encode("utf-8")
                fh.write(struct.pack("<Q", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<Q", arr.ndim))
                for ext in arr.shape:
                    fh.write(struct.pack("<Q", ext))
                fh.write(arr.astype("<f4").tobytes())
    except OSError as exc:
        raise OSError(f"failed to write tensor file {path}: {exc}") from exc


def load_tensors(path, magic=CKPT_MAGIC):
    """Read named float32 arrays back, in file order."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read tensor file {path}: {exc}") from exc
    if not blob.startswith(magic):
        raise ValueError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)
    out = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = arr.copy()
    return out


def save_params(path, params, prefix="", extra=None):
    """Checkpoint a Tensor dict; `extra` carries metadata arrays as-is."""
    tensors = {prefix + k: p.data for k, p in params.items()}
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors, magic=CKPT_MAGIC)


def load_params(path, params, prefix="", dtype=None):
    """Load checkpointed values into an existing Tensor dict, in place."""
    tensors = load_tensors(path, magic=CKPT_MAGIC)
    for k, p in params.items():
        key = prefix + k
        if key not in tensors:
            raise KeyError(f"{path}: missing parameter {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(f"{path}: shape mismatch for {key}: "
                             f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(dtype if dtype is not None else p.data.dtype)
    return tensors


def encode_text(s):
    """Stash a short string as a float tensor (one char code per entry)."""
    return np.array([float(ord(c)) for c in s], dtype=np.float32)


def decode_text(arr):
    return "".join(chr(int(round(v))) for v in np.asarray(arr).ravel())
