"""IDX (MNIST) and CIFAR-10 binary readers, plus small synthetic sets."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from spindrop.errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


def _read_header(buf, n_dims, magic, path):
    need = 4 * (1 + n_dims)
    if len(buf) >= 4:
        got = struct.unpack(">I", buf[:4])[0]
        if got != magic:
            raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated IDX header ({len(buf)} bytes)", offset=len(buf))
    return struct.unpack(f">{n_dims}I", buf[4:need]), need


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file into (N, 1, H, W) float64 scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    (n, h, w), off = _read_header(buf, 3, IDX_IMAGES_MAGIC, path)
    size = n * h * w
    if len(buf) - off < size:
        raise FormatError(f"{path}: expected {size} pixel bytes, found {len(buf) - off}", offset=len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=off)
    return pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,), off = _read_header(buf, 1, IDX_LABELS_MAGIC, path)
    if len(buf) - off < n:
        raise FormatError(f"{path}: expected {n} label bytes, found {len(buf) - off}", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.int64)


def write_idx_images(path, images) -> None:
    """Write (N, H, W) or (N, 1, H, W) uint8 pixels as IDX3."""
    a = np.asarray(images, dtype=np.uint8)
    if a.ndim == 4:
        a = a[:, 0]
    n, h, w = a.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + a.tobytes())


def write_idx_labels(path, labels) -> None:
    a = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, a.shape[0]) + a.tobytes())


def load_cifar10_batch(path):
    """Read a CIFAR-10 binary batch: returns ((N, 3, 32, 32) in [0, 1], labels)."""
    buf = Path(path).read_bytes()
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"{path}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record", offset=whole)
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def write_cifar10_batch(path, images, labels) -> None:
    imgs = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], imgs], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_mnist_dir(directory, train=True):
    d = Path(directory)
    prefix = "train" if train else "t10k"
    for img, lab in ((f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"),
                     (f"{prefix}-images.idx3-ubyte", f"{prefix}-labels.idx1-ubyte")):
        if (d / img).exists():
            return load_idx_images(d / img), load_idx_labels(d / lab)
    raise FileNotFoundError(f"no MNIST IDX files under {d}")


def load_mnist5k():
    """The 5000-digit MNIST sample shipped with mlxtend (500 per class)."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    return X.reshape(-1, 1, 28, 28) / 255.0, y.astype(np.int64)


def make_blobs(n, seed, separation=2.0, std=0.5):
    """Two Gaussian blobs centred at +-(separation, separation); shape (n, 1, 1, 2)."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centres = np.where(y[:, None] == 1, separation, -separation) * np.ones((1, 2))
    x = centres + rng.normal(0.0, std, size=(n, 2))
    return x.reshape(n, 1, 1, 2), y
