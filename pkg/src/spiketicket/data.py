"""Synthetic template datasets and IDX file loading."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray          # [N, C, H, W] in [0, 1]
    y: np.ndarray          # [N] int

    def __len__(self) -> int:
        return len(self.y)

    def split(self, train_fraction: float = 0.8, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        idx = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        tr, te = idx[:cut], idx[cut:]
        return Dataset(self.x[tr], self.y[tr]), Dataset(self.x[te], self.y[te])

    def save(self, path) -> None:
        container.save_tensors(path, {"x": self.x, "y": self.y.astype(np.float64)})

    @classmethod
    def load(cls, path) -> "Dataset":
        t = container.load_tensors(path)
        return cls(t["x"], t["y"].astype(np.int64))


def gen_synthetic(seed: int = 0, n_per_class: int = 100, classes: int = 2,
                  shape: tuple[int, int, int] = (1, 16, 16), contrast: float = 1.0,
                  noise: float = 0.3) -> Dataset:
    """Class templates blended from a shared base, plus pixel noise, clipped to [0, 1].

    ``contrast`` sets how far each class template moves away from the shared
    base pattern; at 0 every class has the same template.
    """
    if classes < 2:
        raise DataError("need at least 2 classes")
    if len(shape) != 3 or min(shape) < 1 or n_per_class < 1:
        raise DataError(f"degenerate dataset shape {shape} / n_per_class {n_per_class}")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, size=shape)
    patterns = rng.uniform(0.0, 1.0, size=(classes,) + tuple(shape))
    templates = (1.0 - contrast) * base + contrast * patterns
    y = np.repeat(np.arange(classes), n_per_class)
    x = templates[y] + noise * rng.standard_normal((len(y),) + tuple(shape))
    order = rng.permutation(len(y))
    return Dataset(np.clip(x[order], 0.0, 1.0), y[order])


def _read_header(buf: bytes, expect: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise DataError(f"{what}: truncated header at byte {len(buf)} (need {need})")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expect:
        raise DataError(f"{what}: bad magic 0x{magic:08x} at byte 0 (expected 0x{expect:08x})")
    return struct.unpack(f">{ndims}I", buf[4:need])


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (ubyte); pixels scaled to [0, 1]."""
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(ib, IDX_IMAGES, 3, str(images_path))
    (nl,) = _read_header(lb, IDX_LABELS, 1, str(labels_path))
    if n != nl:
        raise DataError(f"image count {n} does not match label count {nl}")
    want = 16 + n * rows * cols
    if len(ib) < want:
        raise DataError(f"{images_path}: truncated pixel data at byte {len(ib)} (need {want})")
    if len(lb) < 8 + n:
        raise DataError(f"{labels_path}: truncated labels at byte {len(lb)} (need {8 + n})")
    x = np.frombuffer(ib, dtype=np.uint8, count=n * rows * cols, offset=16)
    y = np.frombuffer(lb, dtype=np.uint8, count=n, offset=8)
    return Dataset(x.reshape(n, 1, rows, cols).astype(np.float64) / 255.0, y.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n) + np.asarray(labels, np.uint8).tobytes())
