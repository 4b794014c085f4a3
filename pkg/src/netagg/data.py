"""Dataset ingestion (IDX files), preprocessing and synthetic pairs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

__all__ = [
    "LabeledDataset",
    "Split",
    "load_idx_images",
    "load_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "load_dataset",
    "save_dataset",
    "to_grayscale",
    "resize_to_32",
    "augment_hflip",
    "synthetic_pair",
    "union",
    "split_train_val",
]

_IMAGES_MAGIC = 0x00000803
_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Normalised grayscale 32x32 images with integer class labels."""

    images: np.ndarray  # float32 [M, 1, 32, 32] in [0, 1]
    labels: np.ndarray  # int64 [M]
    name: str = ""
    num_classes: int = 10
    # per-item source id, kept by union() for per-dataset evaluation
    provenance: np.ndarray | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.name or 'dataset'}: {self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError(f"{self.name or 'dataset'}: pixel values outside [0, 1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def take(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            name=self.name,
            num_classes=self.num_classes,
            provenance=None if self.provenance is None else self.provenance[idx],
        )


@dataclass
class Split:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


# ---------------------------------------------------------------------------
# IDX container


def _read_idx_header(raw: bytes, path, expected_magic: int, ndim: int) -> tuple[tuple[int, ...], int]:
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}i", raw[4 : 4 + 4 * ndim])
    if any(d < 0 for d in dims):
        raise FormatError(f"{path}: negative dimension in header {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > 1 << 40:
            raise FormatError(f"{path}: dimension overflow {dims}")
    return dims, 4 + 4 * ndim


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into float32 [M, H, W] scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    (m, h, w), off = _read_idx_header(raw, path, _IMAGES_MAGIC, 3)
    need = m * h * w
    if len(raw) - off != need:
        raise FormatError(f"{path}: payload {len(raw) - off} bytes, expected {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(m, h, w)
    return pixels.astype(np.float32) / 255.0


def load_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (m,), off = _read_idx_header(raw, path, _LABELS_MAGIC, 1)
    if len(raw) - off != m:
        raise FormatError(f"{path}: payload {len(raw) - off} bytes, expected {m}")
    return np.frombuffer(raw, dtype=np.uint8, offset=off).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write [M, H, W] data to IDX; float inputs in [0,1] are quantised to bytes."""
    if images.ndim != 3:
        raise ShapeError(f"write_idx_images: expected [M,H,W], got {images.shape}")
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    m, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", _IMAGES_MAGIC, m, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    if labels.ndim != 1:
        raise ShapeError(f"write_idx_labels: expected [M], got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("write_idx_labels: labels outside byte range")
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", _LABELS_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def load_dataset(root, name: str, split: str = "train") -> LabeledDataset:
    """Load `<root>/<name>/{split}-images.idx` + labels, conforming to 1x32x32."""
    base = Path(root) / name
    images = load_idx_images(base / f"{split}-images.idx")
    labels = load_idx_labels(base / f"{split}-labels.idx")
    images = resize_to_32(images[:, None, :, :])
    return LabeledDataset(images=images, labels=labels, name=name)


def save_dataset(root, name: str, split: str, images: np.ndarray, labels: np.ndarray) -> None:
    base = Path(root) / name
    base.mkdir(parents=True, exist_ok=True)
    write_idx_images(base / f"{split}-images.idx", images)
    write_idx_labels(base / f"{split}-labels.idx", labels)


# ---------------------------------------------------------------------------
# preprocessing


def to_grayscale(images: np.ndarray) -> np.ndarray:
    """Luminance conversion of [M, 3, H, W] to [M, 1, H, W]."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"to_grayscale: expected [M,3,H,W], got {images.shape}")
    r, g, b = images[:, 0], images[:, 1], images[:, 2]
    return (0.299 * r + 0.587 * g + 0.114 * b).astype(np.float32)[:, None]


def resize_to_32(images: np.ndarray, size: int = 32) -> np.ndarray:
    """Bilinear resize of [M, 1, H, W] to size x size, pixel-centre aligned.

    Inputs already at the target size pass through untouched.
    """
    if images.ndim != 4:
        raise ShapeError(f"resize_to_32: expected [M,1,H,W], got {images.shape}")
    m, c, h, w = images.shape
    if (h, w) == (size, size):
        return np.ascontiguousarray(images, dtype=np.float32)

    def axis_weights(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(size, dtype=np.float64) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_weights(h)
    xlo, xhi, fx = axis_weights(w)
    img = images.astype(np.float64)
    top = img[:, :, ylo][:, :, :, xlo] * (1 - fx) + img[:, :, ylo][:, :, :, xhi] * fx
    bot = img[:, :, yhi][:, :, :, xlo] * (1 - fx) + img[:, :, yhi][:, :, :, xhi] * fx
    out = top * (1 - fy)[None, None, :, None] + bot * fy[None, None, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_hflip(batch: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Mirror each image left-right independently with probability p."""
    flips = rng.random(batch.shape[0]) < p
    out = batch.copy()
    out[flips] = out[flips, :, :, ::-1]
    return out


# ---------------------------------------------------------------------------
# synthetic datasets


def _render_blob(canvas: np.ndarray, cy: float, cx: float, sigma: float, amp: float) -> None:
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    canvas += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def _render_square(canvas: np.ndarray, cy: float, cx: float, half: int, amp: float) -> None:
    h, w = canvas.shape
    y0, y1 = max(0, int(cy) - half), min(h, int(cy) + half + 1)
    x0, x1 = max(0, int(cx) - half), min(w, int(cx) + half + 1)
    canvas[y0:y1, x0:x1] += amp


def _render_bar(canvas: np.ndarray, cy: int, cx: int, length: int, amp: float, horizontal: bool) -> None:
    h, w = canvas.shape
    half = length // 2
    if horizontal:
        canvas[max(0, cy) : min(h, cy + 1), max(0, cx - half) : min(w, cx + half + 1)] += amp
    else:
        canvas[max(0, cy - half) : min(h, cy + half + 1), max(0, cx) : min(w, cx + 1)] += amp


_CLASS_POS = [(9 if k < 5 else 23, 5 + 5.5 * (k % 5)) for k in range(10)]


def synthetic_pair(seed: int, m_per_class: int, n_classes: int = 10) -> tuple[LabeledDataset, LabeledDataset]:
    """Two 10-class datasets sharing a task (class <-> pattern position)
    but rendered in visibly different regimes.

    Dataset A draws one soft bright blob plus equally bright bar
    distractors on a dark noisy background; dataset B draws hard
    squares on a mid-grey textured background.
    Most of B's squares are dark (contrast opposite to A, so a model
    trained on A alone does not transfer) but a bright minority keeps
    the task linearly transferable above chance — shift with a shared
    task.  Both datasets are deterministic per seed.
    """
    if m_per_class < 1:
        raise ConfigError(f"synthetic_pair: m_per_class must be >= 1, got {m_per_class}")
    if n_classes != len(_CLASS_POS):
        raise ConfigError(f"synthetic_pair: only {len(_CLASS_POS)} classes supported")
    rng = np.random.default_rng(seed)
    out = []
    for regime in ("a", "b"):
        m = m_per_class * n_classes
        images = np.zeros((m, 1, 32, 32), np.float32)
        labels = np.repeat(np.arange(n_classes), m_per_class).astype(np.int64)
        for i in range(m):
            k = int(labels[i])
            cy, cx = _CLASS_POS[k]
            jy, jx = rng.uniform(-1.5, 1.5, size=2)
            canvas = np.zeros((32, 32), np.float64)
            # both regimes share the textured background so that features
            # trained on either dataset stay responsive on the other one;
            # that cross-talk is what makes naively merged weights interfere
            canvas += 0.45 + 0.10 * np.sin(np.arange(32) / 3.1)[None, :]
            canvas += rng.uniform(-0.05, 0.05, size=(32, 32))
            if regime == "a":
                _render_blob(canvas, cy + jy, cx + jx, sigma=rng.uniform(2.0, 2.8), amp=rng.uniform(0.40, 0.55))
                # equally bright bar distractors at random positions: the
                # class is the *blob's* position, so peak-energy heuristics
                # are off the table and shape-selective features are needed
                for _ in range(3):
                    _render_bar(
                        canvas,
                        int(rng.integers(2, 30)),
                        int(rng.integers(4, 28)),
                        length=9,
                        amp=rng.uniform(0.40, 0.55),
                        horizontal=bool(rng.integers(0, 2)),
                    )
            else:
                sign = 1.0 if rng.random() < 0.2 else -1.0
                _render_square(canvas, cy + jy, cx + jx, half=3, amp=sign * rng.uniform(0.30, 0.42))
            images[i, 0] = np.clip(canvas, 0.0, 1.0)
        perm = rng.permutation(m)
        out.append(
            LabeledDataset(images=images[perm], labels=labels[perm], name=f"synth-{regime}", num_classes=n_classes)
        )
    return out[0], out[1]


# ---------------------------------------------------------------------------
# combination / splitting


def union(d1: LabeledDataset, d2: LabeledDataset) -> LabeledDataset:
    """Concatenation that remembers which source each item came from."""
    if d1.num_classes != d2.num_classes:
        raise DataError(f"union: class counts differ ({d1.num_classes} vs {d2.num_classes})")
    if d1.images.shape[1:] != d2.images.shape[1:]:
        raise DataError(f"union: image shapes differ ({d1.images.shape[1:]} vs {d2.images.shape[1:]})")
    p1 = d1.provenance if d1.provenance is not None else np.zeros(len(d1), np.int64)
    p2 = d2.provenance if d2.provenance is not None else np.ones(len(d2), np.int64)
    return LabeledDataset(
        images=np.concatenate([d1.images, d2.images]),
        labels=np.concatenate([d1.labels, d2.labels]),
        name=f"{d1.name}+{d2.name}" if d1.name and d2.name else (d1.name or d2.name),
        num_classes=d1.num_classes,
        provenance=np.concatenate([p1, p2]),
    )


def split_train_val(ds: LabeledDataset, val_frac: float = 0.1, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified-by-class split; every item lands in exactly one side."""
    rng = np.random.default_rng(seed)
    val_idx = []
    for k in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == k)
        idx = rng.permutation(idx)
        n_val = max(1, int(round(len(idx) * val_frac))) if len(idx) > 1 else 0
        val_idx.append(idx[:n_val])
    val_mask = np.zeros(len(ds), bool)
    if val_idx:
        val_mask[np.concatenate(val_idx)] = True
    return ds.take(np.flatnonzero(~val_mask)), ds.take(np.flatnonzero(val_mask))
