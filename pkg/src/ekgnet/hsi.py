"""Hyperspectral cube I/O, preprocessing, neighbor-block extraction and splits.

Cube file layout (little-endian)::

    b"EKGH" | u32 height | u32 width | u32 bands
    | f32[bands, height, width]   (band-sequential)
    | u16[height, width]          (labels, 0 = unlabeled)
    | u32 name length | UTF-8 name
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConsistencyError, FormatError, ParameterError

log = logging.getLogger(__name__)

CUBE_MAGIC = b"EKGH"


@dataclass
class HsiCube:
    data: np.ndarray  # (bands, height, width) float32
    labels: np.ndarray  # (height, width) integer, 0 = background
    name: str = ""
    band_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.data.ndim != 3:
            raise ConsistencyError(f"cube data must be bands×height×width, got {self.data.shape}")
        if self.labels.shape != self.data.shape[1:]:
            raise ConsistencyError(
                f"label grid {self.labels.shape} does not match cube extent {self.data.shape[1:]}")
        if self.labels.min(initial=0) < 0:
            raise ConsistencyError("labels must be non-negative")
        if self.band_mask is None:
            self.band_mask = np.ones(self.bands, dtype=bool)
        if int(np.count_nonzero(self.band_mask)) != self.bands:
            raise ConsistencyError("band_mask does not match the retained band count")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max(initial=0))

    def class_histogram(self) -> dict[int, int]:
        values, counts = np.unique(self.labels[self.labels > 0], return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def compact_labels(self) -> "HsiCube":
        """Renumber present classes to ``1..C`` preserving order."""
        present = sorted(self.class_histogram())
        if present == list(range(1, len(present) + 1)):
            return self
        lut = np.zeros(self.labels.max() + 1, dtype=np.int64)
        for new, old in enumerate(present, start=1):
            lut[old] = new
        return replace(self, labels=lut[self.labels])


def cube_nbytes(height: int, width: int, bands: int, name: str = "") -> int:
    return 4 + 12 + 4 * height * width * bands + 2 * height * width + 4 + len(name.encode("utf-8"))


def save_cube(path, cube: HsiCube) -> None:
    if cube.labels.max(initial=0) > 0xFFFF:
        raise ConsistencyError("labels do not fit in u16")
    name = cube.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        fh.write(cube.data.astype("<f4").tobytes())
        fh.write(cube.labels.astype("<u2").tobytes())
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CUBE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    h, w, b = struct.unpack_from("<III", raw, 4)
    off = 16
    n_data, n_lab = 4 * h * w * b, 2 * h * w
    if len(raw) < off + n_data + n_lab + 4:
        raise FormatError(f"{path}: truncated body")
    data = np.frombuffer(raw, dtype="<f4", count=h * w * b, offset=off).reshape(b, h, w)
    off += n_data
    labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=off).reshape(h, w)
    off += n_lab
    (n_name,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + n_name:
        raise FormatError(f"{path}: name length {n_name} does not match remaining {len(raw) - off} bytes")
    name = raw[off:off + n_name].decode("utf-8")
    cube = HsiCube(data.astype(np.float32), labels.astype(np.int64), name=name)
    return cube.compact_labels()


def apply_band_mask(cube: HsiCube, mask) -> HsiCube:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cube.bands,):
        raise ConsistencyError(f"band mask has length {mask.size}, cube has {cube.bands} bands")
    parent = cube.band_mask.copy()
    parent[np.flatnonzero(parent)[~mask]] = False
    return replace(cube, data=cube.data[mask], band_mask=parent)


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------
@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray
    flagged: list[int]

    def apply(self, cube: HsiCube) -> HsiCube:
        data = (cube.data - self.mean[:, None, None]) / self.std[:, None, None]
        return replace(cube, data=data.astype(np.float32))


def fit_normalization(cube: HsiCube, eps: float = 1e-8) -> Normalization:
    """Per-band mean/std over labeled pixels; zero-variance bands get std ``eps``."""
    pix = cube.data[:, cube.labels > 0].astype(np.float64)
    if pix.shape[1] == 0:
        pix = cube.data.reshape(cube.bands, -1).astype(np.float64)
    mean = pix.mean(axis=1)
    std = pix.std(axis=1)
    flagged = [int(i) for i in np.flatnonzero(std < eps)]
    if flagged:
        log.warning("bands %s have zero variance; std floored at %g", flagged, eps)
    std = np.where(std < eps, eps, std)
    return Normalization(mean, std, flagged)


def normalize(cube: HsiCube) -> tuple[HsiCube, Normalization]:
    norm = fit_normalization(cube)
    return norm.apply(cube), norm


# ----------------------------------------------------------------------
# Neighbor blocks
# ----------------------------------------------------------------------
TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class PatchDataset:
    """Labeled M×M×L neighbor blocks around every labeled pixel.

    Blocks are cut lazily from the zero-padded cube; ``labels`` are 0-based
    class indices.
    """

    padded: np.ndarray  # (bands, H + 2r, W + 2r)
    block_size: int
    coords: np.ndarray  # (n, 2) row, col in the unpadded cube
    labels: np.ndarray  # (n,)
    num_classes: int
    partition: np.ndarray | None = None
    ratios: tuple[int, ...] | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def bands(self) -> int:
        return self.padded.shape[0]

    def block(self, i: int) -> np.ndarray:
        """The M×N×L block centered on sample ``i``."""
        r, c = self.coords[i]
        m = self.block_size
        return self.padded[:, r:r + m, c:c + m].transpose(1, 2, 0)

    def blocks(self, indices) -> np.ndarray:
        """Model input ``(n, 1, L, M, N)`` for the given sample indices."""
        indices = np.asarray(indices, dtype=np.int64)
        m = self.block_size
        out = np.empty((len(indices), 1, self.bands, m, m), dtype=np.float32)
        for k, i in enumerate(indices):
            r, c = self.coords[i]
            out[k, 0] = self.padded[:, r:r + m, c:c + m]
        return out

    def split_indices(self, which: int | str) -> np.ndarray:
        if self.partition is None:
            raise ParameterError("dataset has no train/val/test partition")
        if isinstance(which, str):
            which = SPLIT_NAMES.index(which)
        return np.flatnonzero(self.partition == which)


def pad_cube(data: np.ndarray, block_size: int) -> np.ndarray:
    r = block_size // 2
    return np.pad(data, ((0, 0), (r, r), (r, r)))


def pad_and_extract(cube: HsiCube, block_size: int) -> PatchDataset:
    if block_size < 1 or block_size % 2 == 0:
        raise ParameterError(f"block size must be a positive odd integer, got {block_size}")
    rows, cols = np.nonzero(cube.labels > 0)
    return PatchDataset(
        padded=pad_cube(cube.data, block_size),
        block_size=block_size,
        coords=np.stack([rows, cols], axis=1),
        labels=cube.labels[rows, cols] - 1,
        num_classes=cube.num_classes,
        meta={"cube": cube.name},
    )


# ----------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------
def largest_remainder(n: int, ratios) -> list[int]:
    """Apportion ``n`` items by ``ratios``; leftover items go to the largest
    fractional remainders, earlier splits winning ties."""
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(ds: PatchDataset, ratios=(6, 1, 3), seed: int = 0) -> PatchDataset:
    ratios = tuple(int(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) == 0:
        raise ParameterError(f"ratios must be three non-negative integers with a positive sum, got {ratios}")
    rng = np.random.default_rng(seed)
    partition = np.full(len(ds), -1, dtype=np.int64)
    active = sum(1 for r in ratios if r > 0)
    fallback = []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        if idx.size < active:
            log.warning("class %d has %d samples for %d splits; all assigned to train", cls, idx.size, active)
            fallback.append(cls)
            partition[idx] = TRAIN
            continue
        start = 0
        for split, count in enumerate(largest_remainder(idx.size, ratios)):
            partition[idx[start:start + count]] = split
            start += count
    meta = dict(ds.meta, train_fallback_classes=fallback)
    return replace(ds, partition=partition, ratios=ratios, seed=seed, meta=meta)


# ----------------------------------------------------------------------
# Synthetic cubes
# ----------------------------------------------------------------------
def make_prototypes(classes: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth class spectra: each a sum of three Gaussian bumps plus an offset."""
    grid = np.linspace(0.0, 1.0, bands)
    protos = np.empty((classes, bands))
    for c in range(classes):
        centers = rng.uniform(0.05, 0.95, 3)
        widths = rng.uniform(0.05, 0.2, 3)
        amps = rng.uniform(0.3, 1.0, 3)
        protos[c] = 0.2 + sum(a * np.exp(-0.5 * ((grid - mu) / s) ** 2)
                              for a, mu, s in zip(amps, centers, widths))
    return protos


def _box_blur(field_: np.ndarray) -> np.ndarray:
    # 3×3 mean over the spatial axes with edge replication
    padded = np.pad(field_, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = field_.shape[1:]
    acc = np.zeros_like(field_)
    for dr in range(3):
        for dc in range(3):
            acc += padded[:, dr:dr + h, dc:dc + w]
    return acc / 9.0


def synthesize_dataset(classes: int = 3, height: int = 32, width: int = 32, bands: int = 24,
                       seed: int = 0, noise: float = 0.05, prototypes: np.ndarray | None = None,
                       name: str = "synthetic") -> HsiCube:
    """Striped class regions with prototype spectra plus blurred Gaussian noise.

    Classes occupy contiguous vertical stripes of near-equal width.  The noise
    standard deviation is ``noise * max(prototype)`` per class, applied before
    a 3×3 spatial blur of the noise field (class spectra themselves are not
    blurred, so ``noise=0`` yields exact prototypes).
    """
    if classes < 2:
        raise ParameterError("need at least two classes")
    if width < classes or height < 1 or bands < 1 or noise < 0:
        raise ParameterError("invalid synthetic cube geometry")
    rng = np.random.default_rng(seed)
    protos = make_prototypes(classes, bands, rng) if prototypes is None else np.asarray(prototypes, float)
    if protos.shape != (classes, bands):
        raise ParameterError(f"prototypes must have shape {(classes, bands)}")
    bounds = np.linspace(0, width, classes + 1).round().astype(int)
    labels = np.zeros((height, width), dtype=np.int64)
    for c in range(classes):
        labels[:, bounds[c]:bounds[c + 1]] = c + 1
    data = protos[labels - 1].transpose(2, 0, 1)
    if noise > 0:
        sigma = noise * protos.max(axis=1)[labels - 1]
        data = data + _box_blur(rng.standard_normal(data.shape) * sigma[None])
    cube = HsiCube(data.astype(np.float32), labels, name=name,
                   meta={"prototypes": protos.astype(np.float32), "seed": seed, "noise": noise})
    return cube


def nearest_prototype_accuracy(cube: HsiCube, prototypes: np.ndarray) -> float:
    """Fraction of labeled pixels whose nearest prototype (L2) is their own class."""
    mask = cube.labels > 0
    pix = cube.data[:, mask].T.astype(np.float64)
    d = ((pix[:, None, :] - np.asarray(prototypes, float)[None]) ** 2).sum(axis=2)
    # ties resolve to the lower class index
    pred = d.argmin(axis=1) + 1
    return float((pred == cube.labels[mask]).mean())
