"""Datasets that stand in for VAE latents: mirrored-blob pairs and IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx


class DataError(ValueError):
    pass


class IdxParseError(DataError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})")


AMP_RANGE = (0.25, 2.25)
NOISE_STD = 0.05
BLOB_SIGMA = 0.7
FOOTPRINT = 1  # Chebyshev radius of the measurement window around a blob centre


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic-pairs"
    classes: int = 2
    c: int = 2
    h: int = 8
    w: int = 8
    size: int = 4096
    seed: int = 0
    pairs: int = 1
    path: str = ""
    labels_path: str = ""


@dataclass
class Dataset:
    x: np.ndarray  # (n, c, h, w), normalized
    labels: np.ndarray  # (n,)
    spec: DatasetSpec
    mean: np.ndarray  # (c,)
    std: np.ndarray  # (c,)
    layout: "PairLayout | None" = None
    amplitudes: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.x)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return denormalize(x, self.mean, self.std)


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean[:, None, None]) / std[:, None, None]


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return x * std[:, None, None] + mean[:, None, None]


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = x.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return mean, std


# --------------------------------------------------------------------------
# synthetic mirrored pairs


@dataclass(frozen=True)
class PairLayout:
    """Blob centres: ``centers[k, j]`` = ((row, col_left), (row, col_right)) for class k, pair j."""

    centers: np.ndarray  # (classes, pairs, 2, 2) int
    gains: np.ndarray  # (classes, c) per-channel blob gain
    h: int
    w: int

    def class_centroid(self, k: int) -> np.ndarray:
        return self.centers[k].reshape(-1, 2).mean(axis=0)


def pair_layout(classes: int, pairs: int, c: int, h: int, w: int) -> PairLayout:
    """Integer placement of mirror pairs; each class occupies its own band of rows."""
    if h < 3 + 2 * FOOTPRINT or w < 6:
        raise DataError(f"grid {h}x{w} too small for blob footprint radius {FOOTPRINT}")
    lo_row, n_rows = FOOTPRINT, h - 2 * FOOTPRINT
    if n_rows < classes:
        raise DataError(f"{classes} classes do not fit in {h} rows")
    max_col = w // 2 - 2  # keeps left/right members >= 3 cells apart
    centers = np.zeros((classes, pairs, 2, 2), dtype=np.int64)
    for k in range(classes):
        lo = lo_row + (k * n_rows) // classes
        hi = lo_row + ((k + 1) * n_rows) // classes - 1
        for j in range(pairs):
            if pairs == 1:
                row, col = lo + (hi - lo) // 2, FOOTPRINT
            else:
                row = lo + ((hi - lo) * j) // (pairs - 1)
                col = FOOTPRINT + ((max_col - FOOTPRINT) * j) // (pairs - 1)
            centers[k, j, 0] = (row, col)
            centers[k, j, 1] = (row, w - 1 - col)
    for k in range(classes):
        pts = centers[k].reshape(-1, 2)
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                if np.abs(pts[a] - pts[b]).max() < 2 * FOOTPRINT + 1:
                    raise DataError(f"grid {h}x{w} too small for {pairs} blob pairs per class")
    gains = np.array([[1.0 if (k + ch) % 2 == 0 else 0.5 for ch in range(c)] for k in range(classes)])
    return PairLayout(centers, gains, h, w)


def _blob(h: int, w: int, center) -> np.ndarray:
    r, c = np.mgrid[0:h, 0:w]
    return np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2 * BLOB_SIGMA**2))


def render_pairs(labels: np.ndarray, amps: np.ndarray, layout: PairLayout, c: int, noise: np.ndarray) -> np.ndarray:
    """Raw (unnormalized) grids for given labels and per-pair amplitudes (n, pairs)."""
    n = len(labels)
    out = np.zeros((n, c, layout.h, layout.w))
    pairs = layout.centers.shape[1]
    for k in range(layout.centers.shape[0]):
        sel = labels == k
        if not sel.any():
            continue
        base = np.zeros((pairs, layout.h, layout.w))
        for j in range(pairs):
            base[j] = _blob(layout.h, layout.w, layout.centers[k, j, 0]) + _blob(layout.h, layout.w, layout.centers[k, j, 1])
        img = np.einsum("np,phw->nhw", amps[sel], base)
        out[sel] = img[:, None] * layout.gains[k][None, :, None, None]
    return out + noise


def gen_synthetic_pairs(spec: DatasetSpec, rng: np.random.Generator | None = None, stats=None, labels=None) -> Dataset:
    """Class-conditional mirrored blob pairs; both members of a pair share one amplitude.

    ``stats`` (mean, std) reuses normalization from another split. ``labels``
    fixes the class of every sample instead of drawing them.
    """
    if spec.c < 1 or spec.h != spec.w or spec.h not in (8, 16):
        raise DataError(f"synthetic-pairs needs c >= 1 and h = w in {{8, 16}}, got c={spec.c}, {spec.h}x{spec.w}")
    layout = pair_layout(spec.classes, spec.pairs, spec.c, spec.h, spec.w)
    rng = rng if rng is not None else nx.make_rng(spec.seed, "data")
    if labels is None:
        labels = rng.integers(0, spec.classes, size=spec.size)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (spec.size,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= spec.classes:
            raise DataError(f"labels must be {spec.size} class ids in [0, {spec.classes})")
    amps = rng.uniform(*AMP_RANGE, size=(spec.size, spec.pairs))
    noise = rng.normal(0.0, NOISE_STD, size=(spec.size, spec.c, spec.h, spec.w))
    raw = render_pairs(labels, amps, layout, spec.c, noise)
    mean, std = stats if stats is not None else channel_stats(raw)
    x = normalize(raw, mean, std).astype(np.float32)
    return Dataset(x, labels.astype(np.int64), spec, mean, std, layout, amps)


def heldout_split(dataset: Dataset, n: int, seed: int, labels=None) -> Dataset:
    """Fresh synthetic draw sharing the training normalization."""
    spec = DatasetSpec(**{**dataset.spec.__dict__, "size": n, "seed": seed})
    if spec.kind != "synthetic-pairs":
        raise DataError("held-out generation is only defined for synthetic-pairs")
    return gen_synthetic_pairs(spec, nx.make_rng(seed, "heldout"), stats=(dataset.mean, dataset.std), labels=labels)


# --------------------------------------------------------------------------
# IDX files


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload (magic 00 00 08 <ndim>, big-endian extents)."""
    if len(buf) < 4:
        raise IdxParseError(f"header truncated: need 4 bytes, have {len(buf)}", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxParseError(f"bad magic bytes {buf[0]:02x} {buf[1]:02x}", 0)
    if buf[2] != 0x08:
        raise IdxParseError(f"unsupported element type 0x{buf[2]:02x}", 2)
    ndim = buf[3]
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxParseError(f"dimension table truncated: need {head} bytes, have {len(buf)}", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) - head < count:
        raise IdxParseError(f"payload truncated: expected {count} bytes, got {len(buf) - head}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=head).reshape(dims)


def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of (..., H, W) using integer index arithmetic."""
    H, W = img.shape[-2:]
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return img[..., rows[:, None], cols[None, :]]


def read_idx(path: str, spec: DatasetSpec | None = None, labels_path: str | None = None) -> Dataset:
    """Load IDX images scaled to [-1, 1], resized and channel-replicated to the spec geometry."""
    with open(path, "rb") as fh:
        arr = parse_idx(fh.read())
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"expected (n, rows, cols) images, got shape {arr.shape}")
    spec = spec or DatasetSpec(kind="idx-images", h=arr.shape[1], w=arr.shape[2], c=1, size=arr.shape[0], path=path)
    imgs = arr.astype(np.float64) / 127.5 - 1.0
    imgs = resize_nearest(imgs, spec.h, spec.w)
    x = np.repeat(imgs[:, None], spec.c, axis=1)
    labels_path = labels_path or spec.labels_path
    if labels_path:
        with open(labels_path, "rb") as fh:
            labels = parse_idx(fh.read()).astype(np.int64).reshape(-1)
        if len(labels) != len(x):
            raise DataError(f"{len(labels)} labels for {len(x)} images")
    else:
        labels = np.zeros(len(x), dtype=np.int64)
    if spec.size and spec.size < len(x):
        x, labels = x[: spec.size], labels[: spec.size]
    mean, std = channel_stats(x)
    return Dataset(normalize(x, mean, std).astype(np.float32), labels, spec, mean, std)


def write_idx(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic-pairs":
        return gen_synthetic_pairs(spec)
    if spec.kind == "idx-images":
        if not spec.path:
            raise DataError("idx-images needs data.path")
        return read_idx(spec.path, spec)
    raise DataError(f"unknown dataset kind {spec.kind!r}")


# --------------------------------------------------------------------------
# batching


class BatchIterator:
    """Seeded epoch-shuffled batches; state is (epoch, position) and fully serializable."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, drop_last: bool = False):
        if batch_size > len(dataset):
            raise DataError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        self.epoch = 0
        self.pos = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        return nx.make_rng(self.seed, f"shuffle/{epoch}").permutation(len(self.dataset))

    def __iter__(self):
        return self

    def __next__(self) -> dict:
        n = len(self.dataset)
        remaining = n - self.pos
        if remaining == 0 or (self.drop_last and remaining < self.batch_size):
            self.epoch += 1
            self.pos = 0
            self._perm = self._permutation(self.epoch)
        idx = self._perm[self.pos : self.pos + self.batch_size]
        self.pos += len(idx)
        return {"x0": self.dataset.x[idx], "label": self.dataset.labels[idx], "index": idx}

    def epoch_batches(self) -> list[dict]:
        """Remaining batches of the current epoch."""
        out = []
        start_epoch = self.epoch
        while True:
            if self.pos >= len(self.dataset) or (self.drop_last and len(self.dataset) - self.pos < self.batch_size):
                break
            out.append(next(self))
            if self.epoch != start_epoch:
                break
        return out

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "pos": self.pos, "seed": self.seed, "batch_size": self.batch_size}

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.batch_size = int(state["batch_size"])
        self.epoch = int(state["epoch"])
        self.pos = int(state["pos"])
        self._perm = self._permutation(self.epoch)


def batches(dataset: Dataset, batch_size: int, seed: int, drop_last: bool = False) -> BatchIterator:
    return BatchIterator(dataset, batch_size, seed, drop_last)
