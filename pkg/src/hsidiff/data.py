"""Hyperspectral cube I/O, PCA band reduction, patches, splits, synthesis.

Cube file layout (all integers little-endian):

    "HSICUBE1" magic (8 bytes)
    u32 header length
    UTF-8 JSON header: width, height, bands, dtype ("f32"),
        interleave ("bsq"), optional class_names
    W*H*K float32 payload in (band, row, col) order
    "HSILBL01" magic (8 bytes)
    W*H u16 labels, row-major

Label 0 means unlabeled; classes are numbered from 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    HeaderMismatchError,
    TruncatedFileError,
)
from .tensor import make_rng

CUBE_MAGIC = b"HSICUBE1"
LABEL_MAGIC = b"HSILBL01"


@dataclass
class HsiCube:
    """A hyperspectral raster plus per-pixel class labels.

    raster is (bands, height, width) float32, band-sequential like the
    file; labels is (height, width) uint16 with 0 = unlabeled.
    """

    raster: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.raster = np.ascontiguousarray(self.raster, dtype=np.float32)
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise DataError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
            raise DataError("labels out of u16 range")
        self.labels = np.ascontiguousarray(labels, dtype=np.uint16)
        if self.raster.ndim != 3:
            raise DataError(f"raster must be (bands, height, width), got shape {self.raster.shape}")
        if self.labels.shape != self.raster.shape[1:]:
            raise DataError(
                f"labels shape {self.labels.shape} does not match raster plane {self.raster.shape[1:]}"
            )
        if self.class_names is not None and self.labels.size:
            if int(self.labels.max()) > len(self.class_names):
                raise DataError(
                    f"max label {int(self.labels.max())} exceeds {len(self.class_names)} named classes"
                )

    @property
    def bands(self) -> int:
        return self.raster.shape[0]

    @property
    def height(self) -> int:
        return self.raster.shape[1]

    @property
    def width(self) -> int:
        return self.raster.shape[2]

    @property
    def n_classes(self) -> int:
        """Highest label present (class ids are 1-based; 0 = unlabeled)."""
        return int(self.labels.max()) if self.labels.size else 0

    def class_name(self, label: int) -> str:
        if self.class_names is not None and 1 <= label <= len(self.class_names):
            return self.class_names[label - 1]
        return f"class {label}"


@dataclass(frozen=True)
class PcaModel:
    """Per-band mean plus the leading principal axes of the band covariance."""

    mean: np.ndarray              # (K,)
    components: np.ndarray        # (C, K), rows orthonormal
    explained_variance: np.ndarray  # (C,), nonincreasing


@dataclass(frozen=True)
class PatchSample:
    """One labeled pixel with its surrounding spatial window."""

    patch: np.ndarray  # (P, P, C)
    label: int         # >= 1
    pixel: tuple[int, int]  # (row, col)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    val_frac: float
    test_frac: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ConfigError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)!r}")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def save_cube(cube: HsiCube, path) -> None:
    """Write the cube in the byte-exact container format."""
    header = {
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "dtype": "f32",
        "interleave": "bsq",
    }
    if cube.class_names is not None:
        header["class_names"] = list(cube.class_names)
    header_bytes = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        fh.write(cube.raster.astype("<f4", copy=False).tobytes())
        fh.write(LABEL_MAGIC)
        fh.write(cube.labels.astype("<u2", copy=False).tobytes())


def load_cube(path) -> HsiCube:
    """Read a cube, cross-checking the header against the payload present."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CUBE_MAGIC):
        raise TruncatedFileError(f"{path}: file shorter than the magic string")
    if raw[: len(CUBE_MAGIC)] != CUBE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CUBE_MAGIC!r}")
    if len(raw) < len(CUBE_MAGIC) + 4:
        raise TruncatedFileError(f"{path}: missing header length")
    header_len = int(np.frombuffer(raw, dtype="<u4", count=1, offset=len(CUBE_MAGIC))[0])
    header_start = len(CUBE_MAGIC) + 4
    header_end = header_start + header_len
    if len(raw) < header_end:
        raise TruncatedFileError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    for key in ("width", "height", "bands", "dtype", "interleave"):
        if key not in header:
            raise FormatError(f"{path}: header missing key {key!r}")
    if header["dtype"] != "f32":
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    if header["interleave"] != "bsq":
        raise FormatError(f"{path}: unsupported interleave {header['interleave']!r}")
    width, height, bands = (int(header[k]) for k in ("width", "height", "bands"))
    if min(width, height, bands) < 1:
        raise FormatError(f"{path}: non-positive extents {width}x{height}x{bands}")

    payload_bytes = width * height * bands * 4
    label_bytes = width * height * 2
    labels_at = header_end + payload_bytes
    expected_total = labels_at + len(LABEL_MAGIC) + label_bytes

    if raw[labels_at : labels_at + len(LABEL_MAGIC)] != LABEL_MAGIC:
        # The label magic is the synchronization point: if it exists
        # elsewhere the payload length disagrees with the header; if it
        # is absent the file simply ends early.
        found = raw.find(LABEL_MAGIC, header_end)
        if found != -1:
            actual_floats = (found - header_end) // 4
            raise HeaderMismatchError(
                f"{path}: header promises {width * height * bands} floats but payload has {actual_floats}"
            )
        if len(raw) < expected_total:
            raise TruncatedFileError(f"{path}: expected {expected_total} bytes, found {len(raw)}")
        raise BadMagicError(f"{path}: label section magic not found")
    if len(raw) < expected_total:
        raise TruncatedFileError(f"{path}: expected {expected_total} bytes, found {len(raw)}")
    if len(raw) > expected_total:
        raise HeaderMismatchError(f"{path}: {len(raw) - expected_total} trailing bytes after labels")

    raster = (
        np.frombuffer(raw, dtype="<f4", count=width * height * bands, offset=header_end)
        .reshape(bands, height, width)
        .copy()
    )
    labels = (
        np.frombuffer(raw, dtype="<u2", count=width * height, offset=labels_at + len(LABEL_MAGIC))
        .reshape(height, width)
        .copy()
    )
    return HsiCube(raster=raster, labels=labels, class_names=header.get("class_names"))


def fit_pca(cube: HsiCube, components: int) -> PcaModel:
    """Fit PCA over every pixel's spectrum (labeled or not).

    The K x K band covariance (divisor N-1) is eigendecomposed; the top
    ``components`` eigenvectors become the projection rows. Each row's
    largest-magnitude entry is made positive so results are platform
    stable.
    """
    k = cube.bands
    if not 1 <= components <= k:
        raise ConfigError(f"components must be in [1, {k}], got {components}")
    x = cube.raster.reshape(k, -1).T.astype(np.float64)
    n = x.shape[0]
    if n < components + 1:
        raise DataError(f"PCA needs at least {components + 1} pixels, cube has {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigenvalues)[::-1][:components]
    variance = np.maximum(eigenvalues[order], 0.0)
    axes = eigenvectors[:, order].T.copy()
    for row in axes:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=axes, explained_variance=variance)


def apply_pca(cube: HsiCube, model: PcaModel) -> HsiCube:
    """Project every pixel spectrum onto the model axes; labels unchanged."""
    if model.mean.shape[0] != cube.bands:
        raise DataError(
            f"PCA model has {model.mean.shape[0]} bands but cube has {cube.bands}"
        )
    k = cube.bands
    x = cube.raster.reshape(k, -1).T.astype(np.float64)
    projected = (x - model.mean) @ model.components.T
    raster = projected.T.reshape(model.components.shape[0], cube.height, cube.width)
    return HsiCube(
        raster=raster.astype(np.float32),
        labels=cube.labels.copy(),
        class_names=list(cube.class_names) if cube.class_names is not None else None,
    )


def _pad_for_windows(cube: HsiCube, patch_size: int, padding: str) -> tuple[np.ndarray, int]:
    if patch_size < 1:
        raise ConfigError(f"patch size must be >= 1, got {patch_size}")
    if padding != "mirror":
        raise ConfigError(f"unknown padding mode {padding!r}; only 'mirror' is supported")
    # Center convention: the pixel sits at window index ceil(P/2)-1, i.e.
    # the top-left of the central 2x2 block when P is even.
    before = (patch_size + 1) // 2 - 1
    after = patch_size - 1 - before
    plane_first = cube.raster.transpose(1, 2, 0)  # (H, W, K)
    padded = np.pad(plane_first, ((before, after), (before, after), (0, 0)), mode="symmetric")
    return padded, before


def iter_windows(cube: HsiCube, patch_size: int, padding: str = "mirror"):
    """Yield (row, col, window) for every pixel, row-major; borders mirrored."""
    padded, _ = _pad_for_windows(cube, patch_size, padding)
    for row in range(cube.height):
        for col in range(cube.width):
            yield row, col, padded[row : row + patch_size, col : col + patch_size, :]


def extract_patches(cube: HsiCube, patch_size: int, padding: str = "mirror") -> list[PatchSample]:
    """One sample per labeled pixel, ordered by (row, col)."""
    padded, _ = _pad_for_windows(cube, patch_size, padding)
    samples = []
    rows, cols = np.nonzero(cube.labels)
    for row, col in zip(rows.tolist(), cols.tolist()):
        window = padded[row : row + patch_size, col : col + patch_size, :]
        samples.append(
            PatchSample(patch=window, label=int(cube.labels[row, col]), pixel=(row, col))
        )
    return samples


def stratified_split(
    samples: list[PatchSample], spec: SplitSpec
) -> tuple[list[PatchSample], list[PatchSample], list[PatchSample]]:
    """Partition samples per class by the requested fractions.

    Within each class the order is shuffled by spec.seed, counts come
    from largest-remainder rounding (ties resolved train, then val, then
    test), and at least one sample is forced into train.
    """
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    for label, idx in sorted(by_class.items()):
        if len(idx) < 3:
            raise DataError(f"class {label} has only {len(idx)} samples; need at least 3 to split")

    rng = make_rng(spec.seed)
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    train: list[PatchSample] = []
    val: list[PatchSample] = []
    test: list[PatchSample] = []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        exact = [f * n for f in fracs]
        counts = [int(np.floor(e)) for e in exact]
        remainders = [e - c for e, c in zip(exact, counts)]
        for _ in range(n - sum(counts)):
            slot = max(range(3), key=lambda j: (remainders[j], -j))
            counts[slot] += 1
            remainders[slot] = -1.0
        if counts[0] == 0:
            donor = max((1, 2), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[0] += 1
        a, b = counts[0], counts[0] + counts[1]
        train.extend(samples[i] for i in idx[:a])
        val.extend(samples[i] for i in idx[a:b])
        test.extend(samples[i] for i in idx[b:])
    return train, val, test


def class_signatures(classes: int, bands: int) -> np.ndarray:
    """Smooth unit-amplitude spectra, one row per class.

    Class c gets sin(2*pi*c*t + (c-1)*pi/classes) sampled at band
    midpoints, so frequencies and phases both separate the classes.
    """
    t = (np.arange(bands) + 0.5) / bands
    rows = [
        np.sin(2.0 * np.pi * c * t + (c - 1) * np.pi / classes)
        for c in range(1, classes + 1)
    ]
    return np.stack(rows)


def synth_cube(
    classes: int,
    width: int,
    height: int,
    bands: int,
    noise_sigma: float,
    seed: int,
) -> HsiCube:
    """Fully labeled synthetic cube: vertical class strips plus Gaussian noise."""
    if classes < 2:
        raise ConfigError(f"synthetic cube needs at least 2 classes, got {classes}")
    if width < classes:
        raise ConfigError(f"width {width} cannot hold {classes} vertical strips")
    if min(height, bands) < 1:
        raise ConfigError(f"non-positive cube extents {width}x{height}x{bands}")
    if noise_sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {noise_sigma}")
    signatures = class_signatures(classes, bands)
    column_class = (np.arange(width) * classes) // width + 1  # (W,)
    clean = signatures[column_class - 1].T  # (K, W)
    raster = np.broadcast_to(clean[:, None, :], (bands, height, width)).astype(np.float64)
    if noise_sigma > 0:
        raster = raster + make_rng(seed).normal(0.0, noise_sigma, size=raster.shape)
    labels = np.broadcast_to(column_class[None, :], (height, width)).astype(np.uint16)
    return HsiCube(raster=raster.astype(np.float32), labels=labels.copy())
