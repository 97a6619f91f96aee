"""Portable graymap I/O for frames and frame strips."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, img, comment=""):
    """Write a [0,1] float image as binary P5, 8-bit."""
    arr = (np.clip(np.asarray(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: need a 2-D image, got {arr.shape}")
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode() + b"\n"
    header += f"{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + arr.tobytes())


def read_pgm(path):
    """Read P5/P2 into a [0,1] float array. Returns (img, comments)."""
    blob = Path(path).read_bytes()
    if blob[:2] not in (b"P5", b"P2"):
        raise ValueError(f"{path}: not a PGM file")
    binary = blob[:2] == b"P5"
    comments = []
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if blob[pos:pos + 1].isspace():
            pos += 1
            continue
        if blob[pos:pos + 1] == b"#":
            end = blob.index(b"\n", pos)
            comments.append(blob[pos + 1:end].decode().strip())
            pos = end + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(int(blob[pos:end]))
        pos = end
    w, h, maxval = tokens
    pos += 1
    if binary:
        arr = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    else:
        arr = np.array(blob[pos:].split()[:w * h], dtype=np.uint8)
    return arr.reshape(h, w).astype(np.float64) / maxval, comments


def tile_grid(rows):
    """rows: list of lists of equal-shaped [H, W] frames -> one image."""
    return np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)
