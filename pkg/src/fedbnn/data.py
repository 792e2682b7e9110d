"""Dataset ingestion, synthetic generators, and client partitioning.

IDX (big-endian ubyte) files are read bit-exactly per the MNIST
convention. Two generators cover desk-scale work: a small 8x8 Gaussian
prototype set for fast unit tests, and a 28x28 procedurally drawn
10-class "garment" set that stands in for FMNIST when the real files
are not on disk. Partitioners implement equal-share IID, per-class
Dirichlet allocation, and the hard label-count restriction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Bad magic number or malformed IDX header."""


class IdxTruncatedError(ValueError):
    """File ends before the declared payload."""


class IdxCountMismatchError(ValueError):
    """Image and label files declare different record counts."""


class PartitionConfigError(ValueError):
    """Partition spec cannot be satisfied by the dataset."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, h, w) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    n_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # iid | dirichlet | label_count
    n_clients: int
    dirichlet_alpha: float = 0.3
    labels_per_client: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "label_count"):
            raise PartitionConfigError(f"unknown scheme {self.scheme!r}")
        if self.n_clients < 1:
            raise PartitionConfigError("n_clients must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise PartitionConfigError("dirichlet_alpha must be > 0")
        if self.labels_per_client < 1:
            raise PartitionConfigError("labels_per_client must be >= 1")


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Read an IDX image/label file pair, scaling pixels to [0, 1]."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxTruncatedError(f"{images_path}: header truncated")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}, "
                                 f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        payload = f.read(n * rows * cols)
        if len(payload) < n * rows * cols:
            raise IdxTruncatedError(f"{images_path}: expected {n * rows * cols} "
                                    f"pixel bytes, found {len(payload)}")
    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxTruncatedError(f"{labels_path}: header truncated")
        magic, n_labels = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x}, "
                                 f"expected 0x{IDX_LABELS_MAGIC:08x}")
        label_bytes = f.read(n_labels)
        if len(label_bytes) < n_labels:
            raise IdxTruncatedError(f"{labels_path}: expected {n_labels} "
                                    f"label bytes, found {len(label_bytes)}")
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    images = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(n, 1, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if n else 0
    return Dataset(images, labels, n_classes)


def write_idx(ds: Dataset, images_path: str, labels_path: str) -> None:
    """Write a dataset as a big-endian IDX pair (1-channel images only)."""
    n, c, rows, cols = ds.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def synthetic_dataset(n: int, n_classes: int, seed: int, image_hw: int = 8,
                      noise: float = 0.25) -> Dataset:
    """Gaussian class-prototype images with additive noise.

    Labels are assigned round-robin so class counts balance within 1;
    noise=0 makes a nearest-prototype classifier perfect.
    """
    if n < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.0, 1.0, size=(n_classes, 1, image_hw, image_hw))
    labels = np.arange(n) % n_classes
    images = protos[labels] + noise * rng.standard_normal((n, 1, image_hw, image_hw))
    images = np.clip(images, 0.0, 1.0)
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], n_classes)


# --- procedural 28x28 10-class set ---------------------------------------

def _garment_mask(cls: int, hw: int, jx: int, jy: int, scale: float) -> np.ndarray:
    """Binary silhouette for one of ten coarse garment-like shapes."""
    m = np.zeros((hw, hw))
    y, x = np.mgrid[0:hw, 0:hw]
    cx, cy = hw // 2 + jx, hw // 2 + jy
    s = scale

    def rect(y0, y1, x0, x1):
        m[(y >= cy + y0 * s) & (y < cy + y1 * s)
          & (x >= cx + x0 * s) & (x < cx + x1 * s)] = 1.0

    if cls == 0:      # tee: torso + short sleeves
        rect(-8, 8, -5, 5)
        rect(-8, -3, -9, 9)
    elif cls == 1:    # trousers: two legs
        rect(-9, 9, -5, -1)
        rect(-9, 9, 1, 5)
    elif cls == 2:    # pullover: torso + long sleeves
        rect(-8, 8, -4, 4)
        rect(-8, 6, -9, 9)
    elif cls == 3:    # dress: narrow top widening down
        for r in range(-9, 10):
            half = 2 + (r + 9) * 0.35
            rect(r, r + 1, -half, half)
    elif cls == 4:    # coat: wide torso, open front line
        rect(-9, 9, -7, 7)
        m[(y >= cy - 9 * s) & (y < cy + 9 * s)
          & (np.abs(x - cx) < 0.7)] = 0.0
    elif cls == 5:    # sandal: staggered straps
        rect(4, 8, -9, 9)
        rect(-2, 0, -9, 9)
        rect(-8, -6, -9, 9)
    elif cls == 6:    # shirt: torso + sleeves + collar notch
        rect(-8, 8, -5, 5)
        rect(-8, 0, -9, 9)
        m[(y >= cy - 9) & (y < cy - 5) & (np.abs(x - cx) < 2)] = 0.0
    elif cls == 7:    # sneaker: low wedge
        rect(2, 8, -9, 9)
        rect(-2, 2, 0, 9)
    elif cls == 8:    # bag: box + handle
        rect(-2, 8, -8, 8)
        ring = (np.abs(np.hypot(x - cx, y - (cy - 2 * s)) - 6 * s) < 1.2)
        m[ring & (y < cy - 2 * s)] = 1.0
    else:             # boot: tall shaft + foot
        rect(-9, 9, -2, 4)
        rect(5, 9, -9, 4)
    return m


def fmnist_like_dataset(n: int, seed: int, noise: float = 0.35,
                        n_classes: int = 10) -> Dataset:
    """Procedural 28x28 grayscale garments; a stand-in with FMNIST's shape.

    Per-sample jitter moves/scales the silhouette and modulates its
    intensity; heavy pixel noise keeps the task non-trivial for small
    models and hostile to naive post-training binarization.
    """
    hw = 28
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    images = np.zeros((n, 1, hw, hw))
    for idx in range(n):
        jx, jy = rng.integers(-2, 3, size=2)
        scale = rng.uniform(0.85, 1.15)
        base = _garment_mask(int(labels[idx]), hw, int(jx), int(jy), scale)
        intensity = rng.uniform(0.55, 1.0)
        texture = rng.uniform(0.75, 1.0, size=(hw, hw))
        img = base * intensity * texture + noise * rng.standard_normal((hw, hw))
        images[idx, 0] = np.clip(img, 0.0, 1.0)
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], n_classes)


def split_val_test(test_set: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle and halve into disjoint validation and test sets."""
    n = len(test_set)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return test_set.subset(perm[:half]), test_set.subset(perm[half:])


def partition(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Client index lists under the requested scheme.

    Partitions are pairwise disjoint and cover the dataset (any
    remainder from uneven division lands on the lowest-index clients).
    """
    n = len(ds)
    if n < spec.n_clients:
        raise PartitionConfigError(f"{n} samples cannot serve {spec.n_clients} clients")
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "iid":
        perm = rng.permutation(n)
        return [np.sort(part) for part in np.array_split(perm, spec.n_clients)]
    if spec.scheme == "dirichlet":
        parts: list[list[int]] = [[] for _ in range(spec.n_clients)]
        for cls in range(ds.n_classes):
            idx = np.flatnonzero(ds.labels == cls)
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(spec.n_clients, spec.dirichlet_alpha))
            cuts = (np.cumsum(p) * len(idx)).astype(int)[:-1]
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].extend(chunk.tolist())
        return [np.sort(np.array(p, dtype=int)) for p in parts]
    # label_count
    if spec.labels_per_client > ds.n_classes:
        raise PartitionConfigError(
            f"labels_per_client {spec.labels_per_client} exceeds {ds.n_classes} classes")
    if spec.n_clients * spec.labels_per_client < ds.n_classes:
        raise PartitionConfigError(
            f"{spec.n_clients} clients x {spec.labels_per_client} labels "
            f"cannot cover {ds.n_classes} classes")
    client_labels: list[set[int]] = [set() for _ in range(spec.n_clients)]
    # cyclic pass guarantees every label has a holder, then random fill
    for lbl in range(ds.n_classes):
        client_labels[lbl % spec.n_clients].add(lbl)
    for k in range(spec.n_clients):
        pool = [l for l in range(ds.n_classes) if l not in client_labels[k]]
        extra = spec.labels_per_client - len(client_labels[k])
        if extra > 0:
            client_labels[k].update(
                rng.choice(pool, size=extra, replace=False).tolist())
    parts = [[] for _ in range(spec.n_clients)]
    for lbl in range(ds.n_classes):
        holders = [k for k in range(spec.n_clients) if lbl in client_labels[k]]
        idx = np.flatnonzero(ds.labels == lbl)
        rng.shuffle(idx)
        for holder, chunk in zip(holders, np.array_split(idx, len(holders))):
            parts[holder].extend(chunk.tolist())
    return [np.sort(np.array(p, dtype=int)) for p in parts]


def export_partition_manifest(parts: list[np.ndarray], path: str) -> None:
    """JSON manifest: client id -> sorted sample indices."""
    with open(path, "w") as f:
        json.dump({str(k): p.tolist() for k, p in enumerate(parts)},
                  f, sort_keys=True)
