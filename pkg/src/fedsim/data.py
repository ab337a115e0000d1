"""Dataset loading (IDX format), synthetic generators, client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncation, or count mismatch."""


@dataclass
class Dataset:
    images: np.ndarray  # float32 [n, C, H, W]
    labels: np.ndarray  # int64 [n]
    n_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


# ---------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, expected_magic: int, n_dims: int) -> np.ndarray:
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{n_dims}i", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files (optionally gzipped).

    Pixels are scaled to [0,1]; images come back as [n, 1, H, W].
    """
    images = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path} has {images.shape[0]} images but "
            f"{labels_path} has {labels.shape[0]} labels"
        )
    imgs = (images.astype(np.float32) / 255.0)[:, None, :, :]
    labs = labels.astype(np.int64)
    return Dataset(imgs, labs, int(labs.max()) + 1)


def write_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path,
              compress: bool = False) -> None:
    """Write [n,H,W] uint8 images and [n] uint8 labels as IDX files."""
    n, h, w = images_u8.shape
    img_blob = struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w) + images_u8.tobytes()
    lab_blob = (
        struct.pack(">ii", IDX_LABELS_MAGIC, len(labels_u8))
        + labels_u8.astype(np.uint8).tobytes()
    )
    for blob, path in ((img_blob, images_path), (lab_blob, labels_path)):
        if compress:
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


# ---------------------------------------------------------------------------
# partitioning

Partition = list[np.ndarray]


def iid_partition(labels: np.ndarray, n_clients: int, seed: int) -> Partition:
    """Equal-size disjoint splits, stratified so class counts differ by <= 1.

    Samples are shuffled within each class, concatenated class by class, and
    dealt round-robin; a random offset decides which clients get the extras.
    """
    n = len(labels)
    if n_clients < 1 or n_clients > n:
        raise ValueError(f"cannot split {n} samples across {n_clients} clients")
    rng = np.random.default_rng(seed)
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    )
    offset = int(rng.integers(n_clients))
    clients: list[list[int]] = [[] for _ in range(n_clients)]
    for j, idx in enumerate(order):
        clients[(j + offset) % n_clients].append(int(idx))
    return [np.sort(np.asarray(c, np.int64)) for c in clients]


def dirichlet_partition(labels: np.ndarray, n_clients: int, alpha: float, seed: int) -> Partition:
    """Per-class Dirichlet(alpha) split across clients.

    Every sample is assigned; a client left empty by the draw is repaired by
    taking one sample from the currently largest client.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    n = len(labels)
    if n_clients < 1 or n_clients > n:
        raise ValueError(f"cannot split {n} samples across {n_clients} clients")
    rng = np.random.default_rng(seed)
    clients: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(n_clients, alpha))
        bounds = np.round(np.cumsum(props) * len(idx)).astype(int)
        start = 0
        for k, stop in enumerate(bounds):
            clients[k].extend(int(i) for i in idx[start:stop])
            start = stop
    # repair empty clients
    while True:
        sizes = [len(c) for c in clients]
        if min(sizes) > 0:
            break
        donor = int(np.argmax(sizes))
        taker = sizes.index(0)
        clients[taker].append(clients[donor].pop())
    return [np.sort(np.asarray(c, np.int64)) for c in clients]


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_gaussian(n_classes: int, dim: int, n_per_class: int, spread: float,
                       seed: int) -> Dataset:
    """Gaussian blobs at simplex corners, rescaled to [0,1], shaped [n,1,dim,1]."""
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    if dim < n_classes:
        raise ValueError(f"dim {dim} too small for {n_classes} simplex means")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(n_classes):
        mean = np.zeros(dim)
        mean[c] = 1.0
        xs.append(mean + spread * rng.standard_normal((n_per_class, dim)))
        ys.append(np.full(n_per_class, c, np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    x = (x - x.min()) / (x.max() - x.min())  # affine map into [0,1]
    return Dataset(x.reshape(-1, 1, dim, 1).astype(np.float32), y, n_classes)


# 7x7 digit glyphs; upscaled x4 they make 28x28 images compatible with the
# fMNIST architecture when real IDX files are not available.
_GLYPHS = [
    [" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
    ["  #  ", " ##  ", "# #  ", "  #  ", "  #  ", "  #  ", "#####"],
    [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    ["#### ", "    #", "    #", " ### ", "    #", "    #", "#### "],
    ["#  # ", "#  # ", "#  # ", "#####", "   # ", "   # ", "   # "],
    ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    [" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "],
    ["#####", "    #", "   # ", "  #  ", "  #  ", " #   ", " #   "],
    [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    [" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "],
]


def _glyph_bitmaps() -> np.ndarray:
    grids = np.zeros((10, 7, 7), np.float32)
    for d, rows in enumerate(_GLYPHS):
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                if ch == "#":
                    grids[d, r, c + 1] = 1.0  # center the 5-wide glyph
    return grids


def synthetic_glyphs(n: int, seed: int, noise: float = 0.25, shift: int = 3,
                     amp_lo: float = 0.55) -> Dataset:
    """Procedural 28x28 10-class digit-glyph images.

    Deterministic stand-in for a 28x28 grayscale benchmark at desk scale:
    each sample is an upscaled glyph with random shift, amplitude jitter in
    [amp_lo, 1] and additive noise.
    """
    rng = np.random.default_rng(seed)
    base = np.kron(_glyph_bitmaps(), np.ones((4, 4), np.float32))  # [10,28,28]
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.empty((n, 1, 28, 28), np.float32)
    for i, c in enumerate(labels):
        img = base[c] * rng.uniform(amp_lo, 1.0)
        img = np.roll(img, rng.integers(-shift, shift + 1), axis=0)
        img = np.roll(img, rng.integers(-shift, shift + 1), axis=1)
        img = img + rng.uniform(0.0, noise, (28, 28))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, 10)


def write_glyph_idx(out_dir, n_train: int, n_test: int, seed: int,
                    noise: float = 0.25, amp_lo: float = 0.55) -> dict[str, str]:
    """Materialize glyph train/test sets as gzipped IDX files.

    Returns the four file paths keyed like the common fMNIST file names.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {
        "train_images": "train-images-idx3-ubyte.gz",
        "train_labels": "train-labels-idx1-ubyte.gz",
        "test_images": "t10k-images-idx3-ubyte.gz",
        "test_labels": "t10k-labels-idx1-ubyte.gz",
    }
    for split, count, off in (("train", n_train, 0), ("test", n_test, 1)):
        ds = synthetic_glyphs(count, seed=seed * 2 + off, noise=noise, amp_lo=amp_lo)
        imgs = np.round(ds.images[:, 0] * 255.0).astype(np.uint8)
        write_idx(imgs, ds.labels.astype(np.uint8),
                  out / names[f"{split}_images"], out / names[f"{split}_labels"],
                  compress=True)
    return {k: str(out / v) for k, v in names.items()}


def make_backdoor_sample(dataset: Dataset, source_class: int, target_label: int,
                         seed: int):
    """One image drawn from source_class, paired with the attacker's label."""
    for name, v in (("source_class", source_class), ("target_label", target_label)):
        if not 0 <= v < dataset.n_classes:
            raise ValueError(f"{name} {v} outside [0, {dataset.n_classes})")
    if source_class == target_label:
        raise ValueError(f"source class and target label are both {source_class}")
    idx = np.flatnonzero(dataset.labels == source_class)
    if len(idx) == 0:
        raise ValueError(f"no samples of class {source_class}")
    pick = int(np.random.default_rng(seed).choice(idx))
    return dataset.images[pick].copy(), int(target_label)
