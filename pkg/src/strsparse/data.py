"""Seeded synthetic datasets and an IDX (MNIST-style) file reader."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(FileNotFoundError):
    pass


def split(X, y, test_fraction: float, rng: np.random.Generator):
    n = len(X)
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    te, tr = order[:n_test], order[n_test:]
    return (X[tr], y[tr]), (X[te], y[te])


def gaussian_blobs(n: int = 1200, dim: int = 16, n_classes: int = 4, noise: float = 1.0,
                   separation: float = 3.0, seed: int = 0, test_fraction: float = 0.25):
    """Isotropic Gaussian clusters with centers at distance ``separation`` from the origin."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.arange(n) % n_classes
    X = centers[y] + noise * rng.normal(size=(n, dim))
    return split(X, y, test_fraction, rng)


def _pattern(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size))
    L = size // 2 + rng.integers(0, size // 4)
    r0, c0 = rng.integers(0, size - L + 1, size=2)
    if kind == 0:  # horizontal bar
        img[r0 + L // 2, c0:c0 + L] = 1.0
    elif kind == 1:  # vertical bar
        img[r0:r0 + L, c0 + L // 2] = 1.0
    elif kind == 2:  # diagonal
        idx = np.arange(L)
        img[r0 + idx, c0 + idx] = 1.0
    elif kind == 3:  # hollow square
        img[r0, c0:c0 + L] = img[r0 + L - 1, c0:c0 + L] = 1.0
        img[r0:r0 + L, c0] = img[r0:r0 + L, c0 + L - 1] = 1.0
    else:  # anti-diagonal
        idx = np.arange(L)
        img[r0 + idx, c0 + L - 1 - idx] = 1.0
    return img


def pattern_images(n: int = 800, size: int = 16, n_classes: int = 4, noise: float = 0.3, seed: int = 0,
                   test_fraction: float = 0.25):
    """One-channel ``size x size`` images of randomly placed strokes, one stroke type per class."""
    if not 2 <= n_classes <= 5:
        raise ValueError("pattern_images supports 2..5 classes")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % n_classes
    X = np.stack([_pattern(int(c), size, rng) for c in y])
    X = X + noise * rng.normal(size=X.shape)
    X = X[:, None, :, :]
    return split(X, y, test_fraction, rng)


def sequence_task(n: int = 1000, T: int = 12, dim: int = 8, n_directions: int = 2, noise: float = 1.0,
                  seed: int = 0, test_fraction: float = 0.25):
    """Sequences whose label is the sign pattern of time-summed projections on a few hidden directions.

    With ``n_directions`` = 2 there are 4 classes and only a rank-2 input
    projection is needed to solve the task.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_directions, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    X = noise * rng.normal(size=(n, T, dim))
    proj = X.sum(axis=1) @ dirs.T  # [n, n_directions]
    bits = (proj > 0).astype(int)
    y = bits @ (2 ** np.arange(n_directions))
    return split(X, y, test_fraction, rng)


# -- IDX ---------------------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    count = int(np.prod(dims)) if dims else 1
    body = raw[4 + 4 * ndim:]
    if len(body) < count * dtype.itemsize:
        raise ValueError(f"{path}: expected {count} values, file is truncated")
    return np.frombuffer(body, dtype=dtype, count=count).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def load_idx_dataset(images_path, labels_path, test_fraction: float = 0.2, seed: int = 0, limit: int | None = None):
    """Images scaled to [0, 1] with a channel axis, split into train/test."""
    missing = [str(p) for p in (images_path, labels_path) if not Path(p).exists()]
    if missing:
        raise DatasetError(
            "IDX dataset not found: " + ", ".join(missing)
            + " (expected an images file with magic 0x00000803 and a labels file with magic 0x00000801;"
            " use the synthetic task instead by enabling the synthetic fallback)"
        )
    X = read_idx(images_path)
    y = read_idx(labels_path)
    with open(images_path, "rb") if not str(images_path).endswith(".gz") else gzip.open(images_path, "rb") as fh:
        magic = struct.unpack(">I", fh.read(4))[0]
    if magic != IDX_IMAGES_MAGIC or X.ndim != 3:
        raise ValueError(f"{images_path}: expected 3-d ubyte images (magic 0x00000803), got magic {magic:#010x}")
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"{labels_path}: expected {len(X)} labels")
    if limit:
        X, y = X[:limit], y[:limit]
    X = X.astype(np.float64)[:, None] / 255.0
    y = y.astype(np.int64)
    return split(X, y, test_fraction, np.random.default_rng(seed))
