"""Feature extractors: per-band image statistics and random convolutional
features, with optional whitened-patch (empirical) filter initialization,
plus import/export of externally computed embeddings.

The convolutional extractor applies F/2 filters as valid stride-1
cross-correlations and emits, per filter, the spatial means of the
positive and negative rectified responses, giving an F-dimensional
nonnegative feature vector independent of image size.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AllMaskedChannel,
    ChannelMismatch,
    CorruptFile,
    DimensionInconsistent,
    DimensionMismatch,
    EmptySelection,
    EmptyTrainSplit,
    ExtractionError,
    ImageTooSmall,
    IoFailure,
    MagicMismatch,
    NotEnoughPatches,
    OddFeatureCount,
    SingularCovariance,
    UnknownId,
)
from .preprocess import Pipeline, apply_pipeline
from .raster import DatasetManifest, Label, RasterImage, load_raster, select_bands

RSEMB1_MAGIC = b"RSEMB1\n"
RSRCF1_MAGIC = b"RSRCF1\n"

ExtractorFn = Callable[[RasterImage], np.ndarray]


@dataclass
class FeatureMatrix:
    """n x d embedding table aligned with sample ids and labels."""

    values: np.ndarray
    ids: list[str]
    labels: list[Label]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        n = self.values.shape[0]
        if len(self.ids) != n or len(self.labels) != n:
            raise ValueError("ids/labels must align with value rows")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def task(self) -> str:
        if not self.labels:
            raise ValueError("empty matrix has no task")
        return self.labels[0].task

    def label_indices(self) -> np.ndarray:
        return np.asarray([lb.index for lb in self.labels], dtype=np.int64)

    def label_bits(self) -> np.ndarray:
        return np.asarray([lb.bits for lb in self.labels], dtype=bool)


@dataclass(frozen=True)
class PatchSet:
    """Flattened k x k x c training-image windows for filter fitting."""

    patches: np.ndarray  # (N, c*k*k) float32
    in_channels: int
    kernel_size: int
    provenance: tuple[str, int, int]  # (dataset name, seed, N)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.patches, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError("patches must be (N, dim)")
        if arr.shape[1] != self.in_channels * self.kernel_size ** 2:
            raise ValueError("patch dim != c * k * k")
        object.__setattr__(self, "patches", arr)

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class ZcaModel:
    """Whitening transform p -> W (p - mean) with W = U (L + eI)^-1/2 U^T."""

    mean: np.ndarray
    whitening: np.ndarray
    epsilon: float

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        w = np.ascontiguousarray(self.whitening, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or mean.shape != (w.shape[0],):
            raise ValueError("whitening matrix must be square and match the mean")
        if not np.isfinite(w).all() or not np.isfinite(mean).all():
            raise ValueError("whitening transform must be finite")
        if np.abs(w - w.T).max() > 1e-8:
            raise ValueError("whitening matrix must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "whitening", w)


@dataclass(frozen=True)
class RcfBank:
    """Convolutional filter bank; F/2 filters yield F features via +/- pooling."""

    weights: np.ndarray  # (F/2, c, k, k) float32
    biases: np.ndarray  # (F/2,) float32
    seed: int
    init_mode: str  # random | empirical

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.biases, dtype=np.float32)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError("weights must be (F/2, c, k, k)")
        if w.shape[3] % 2 != 1:
            raise ValueError("kernel size must be odd")
        if b.shape != (w.shape[0],):
            raise ValueError("biases must align with filters")
        if not np.isfinite(w).all():
            raise ValueError("weights must be finite")
        if self.init_mode not in ("random", "empirical"):
            raise ValueError(f"bad init_mode {self.init_mode!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def num_features(self) -> int:
        return 2 * self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def image_statistics(image: RasterImage) -> np.ndarray:
    """Per channel (mean, population std, min, max), concatenated in band
    order into a 4c vector."""
    c = image.channels
    out = np.empty(4 * c, dtype=np.float64)
    mask = image.nodata_mask
    for ch in range(c):
        vals = image.data[ch][~mask] if mask is not None else image.data[ch].ravel()
        if vals.size == 0:
            raise AllMaskedChannel(f"channel {ch} has no unmasked pixels")
        v64 = vals.astype(np.float64)
        out[4 * ch:4 * ch + 4] = (v64.mean(), v64.std(), v64.min(), v64.max())
    return out.astype(np.float32)


def sample_patches(
    manifest: DatasetManifest,
    band_indices: Sequence[int] | None,
    pipeline: Pipeline,
    kernel_size: int,
    n_patches: int,
    seed: int,
) -> PatchSet:
    """Draw k x k windows at uniform random positions from train-split images.

    All randomness is drawn up front from one seeded stream (image index
    plus unit-interval row/col coordinates), so the result is independent
    of the order in which images are processed.
    """
    train = manifest.subset(["train"])
    if not train:
        raise EmptyTrainSplit(f"dataset {manifest.name!r} has no train samples")
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    rng = np.random.default_rng(seed)
    img_idx = rng.integers(0, len(train), size=n_patches)
    unit_pos = rng.random(size=(n_patches, 2))

    patches: np.ndarray | None = None
    k = kernel_size
    for i in np.unique(img_idx):
        sample = train[i]
        image = _load_processed(sample, band_indices, pipeline)
        c, h, w = image.data.shape
        if h < k or w < k:
            raise ImageTooSmall(
                f"sample {sample.id!r} is {h}x{w} after preprocessing, kernel is {k}"
            )
        if patches is None:
            patches = np.empty((n_patches, c * k * k), dtype=np.float32)
        rows = np.minimum((unit_pos[:, 0] * (h - k + 1)).astype(np.int64), h - k)
        cols = np.minimum((unit_pos[:, 1] * (w - k + 1)).astype(np.int64), w - k)
        for p in np.nonzero(img_idx == i)[0]:
            r, col = rows[p], cols[p]
            patches[p] = image.data[:, r:r + k, col:col + k].reshape(-1)
    assert patches is not None
    return PatchSet(
        patches=patches,
        in_channels=patches.shape[1] // (k * k),
        kernel_size=k,
        provenance=(manifest.name, seed, n_patches),
    )


def zca_fit(patches: PatchSet, epsilon: float | None = None) -> ZcaModel:
    """Fit the whitening transform from patch covariance.

    epsilon=None picks 1e-6 times the mean eigenvalue, which keeps
    near-singular directions bounded without touching well-conditioned
    ones; epsilon=0 demands full rank and raises otherwise.
    """
    x = patches.patches.astype(np.float64)
    n, dim = x.shape
    if n < dim:
        raise NotEnoughPatches(f"{n} patches cannot fit a {dim}-dim covariance")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    if epsilon is None:
        epsilon = 1e-6 * float(eigvals.mean())
    if epsilon == 0.0:
        tol = max(float(eigvals.max()), 0.0) * 1e-10
        if eigvals.min() <= tol:
            raise SingularCovariance(
                f"smallest eigenvalue {eigvals.min():.3e} <= tolerance {tol:.3e}"
            )
    inv_sqrt = 1.0 / np.sqrt(eigvals + epsilon)
    w = (eigvecs * inv_sqrt) @ eigvecs.T
    w = (w + w.T) / 2.0
    return ZcaModel(mean=mean, whitening=w, epsilon=float(epsilon))


def zca_apply(model: ZcaModel, patches: PatchSet) -> PatchSet:
    if patches.dim != model.mean.shape[0]:
        raise DimensionMismatch(
            f"patch dim {patches.dim} != model dim {model.mean.shape[0]}"
        )
    out = (patches.patches.astype(np.float64) - model.mean) @ model.whitening.T
    return PatchSet(
        patches=out.astype(np.float32),
        in_channels=patches.in_channels,
        kernel_size=patches.kernel_size,
        provenance=patches.provenance,
    )


def rcf_init_random(in_channels: int, features: int, kernel_size: int,
                    seed: int) -> RcfBank:
    """F/2 filters with i.i.d. standard-normal entries, zero biases."""
    if features % 2 != 0 or features < 2:
        raise OddFeatureCount(f"feature count must be even and >= 2, got {features}")
    rng = np.random.default_rng(seed)
    shape = (features // 2, in_channels, kernel_size, kernel_size)
    weights = rng.standard_normal(shape).astype(np.float32)
    return RcfBank(weights=weights, biases=np.zeros(features // 2, dtype=np.float32),
                   seed=seed, init_mode="random")


def rcf_init_empirical(patches: PatchSet, zca: ZcaModel, features: int,
                       seed: int) -> RcfBank:
    """Filters are whitened training patches sampled without replacement."""
    if features % 2 != 0 or features < 2:
        raise OddFeatureCount(f"feature count must be even and >= 2, got {features}")
    n_filters = features // 2
    if patches.count < n_filters:
        raise NotEnoughPatches(
            f"{patches.count} patches < {n_filters} filters requested"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(patches.count, size=n_filters, replace=False)
    subset = PatchSet(
        patches=patches.patches[chosen],
        in_channels=patches.in_channels,
        kernel_size=patches.kernel_size,
        provenance=patches.provenance,
    )
    whitened = zca_apply(zca, subset)
    k = patches.kernel_size
    weights = whitened.patches.reshape(n_filters, patches.in_channels, k, k)
    return RcfBank(weights=weights.astype(np.float32),
                   biases=np.zeros(n_filters, dtype=np.float32),
                   seed=seed, init_mode="empirical")


def rcf_extract(image: RasterImage, bank: RcfBank) -> np.ndarray:
    """Valid stride-1 cross-correlation with each filter, then spatial
    means of the +/- rectified responses, interleaved [pos0, neg0, ...]."""
    c, h, w = image.data.shape
    k = bank.kernel_size
    if c != bank.in_channels:
        raise ChannelMismatch(f"image has {c} channels, bank expects {bank.in_channels}")
    if h < k or w < k:
        raise ImageTooSmall(f"image {h}x{w} smaller than {k}x{k} kernel")
    # windows: (c, h', w', k, k) -> (h'*w', c*k*k)
    windows = sliding_window_view(image.data, (k, k), axis=(1, 2))
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(-1, c * k * k)
    filters = bank.weights.reshape(bank.weights.shape[0], -1)
    responses = cols @ filters.T + bank.biases
    pos = np.maximum(responses, 0.0).mean(axis=0, dtype=np.float64)
    neg = np.maximum(-responses, 0.0).mean(axis=0, dtype=np.float64)
    out = np.empty(bank.num_features, dtype=np.float32)
    out[0::2] = pos
    out[1::2] = neg
    return out


def extract_features(
    manifest: DatasetManifest,
    band_indices: Sequence[int] | None,
    pipeline: Pipeline,
    extractor: ExtractorFn,
    splits: Sequence[str],
    workers: int = 1,
) -> FeatureMatrix:
    """Run band selection, the pipeline, and the extractor over every sample
    in the chosen splits, in manifest order. Any per-sample failure aborts
    the whole extraction."""
    samples = manifest.subset(splits)
    if not samples:
        raise EmptySelection(f"no samples in splits {list(splits)}")

    def run_one(sample):
        try:
            image = _load_processed(sample, band_indices, pipeline)
            return np.asarray(extractor(image), dtype=np.float32)
        except ExtractionError:
            raise
        except Exception as e:
            raise ExtractionError(sample.id, str(e)) from e

    if workers <= 1:
        rows = [run_one(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, samples))

    dim = rows[0].shape[-1]
    for s, row in zip(samples, rows):
        if row.ndim != 1 or row.shape[0] != dim:
            raise ExtractionError(s.id, f"feature dim {row.shape} != expected ({dim},)")
    return FeatureMatrix(
        values=np.stack(rows),
        ids=[s.id for s in samples],
        labels=[s.label for s in samples],
    )


def _load_processed(sample, band_indices, pipeline: Pipeline) -> RasterImage:
    image = load_raster(sample.image_path)
    if band_indices is not None:
        image = select_bands(image, band_indices)
    return apply_pipeline(image, pipeline)


# embedding interchange, format RSEMB1: magic, u32 n, u32 d, n*d float32
# row-major little-endian; ids in a sidecar text file, line i <-> row i

def write_embeddings(matrix: FeatureMatrix, values_path: str | Path,
                     ids_path: str | Path) -> None:
    try:
        with open(values_path, "wb") as f:
            f.write(RSEMB1_MAGIC)
            f.write(struct.pack("<II", matrix.n, matrix.dim))
            f.write(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
        Path(ids_path).write_text("".join(i + "\n" for i in matrix.ids))
    except OSError as e:
        raise IoFailure(f"cannot write embeddings: {e}") from e


def import_embeddings(values_path: str | Path, ids_path: str | Path,
                      manifest: DatasetManifest) -> FeatureMatrix:
    """Load an RSEMB1 file and join labels from the manifest by id."""
    values_path = Path(values_path)
    try:
        data = values_path.read_bytes()
        id_lines = Path(ids_path).read_text().splitlines()
    except OSError as e:
        raise IoFailure(f"cannot read embeddings: {e}") from e
    if not data.startswith(RSEMB1_MAGIC):
        raise MagicMismatch(f"{values_path}: not an RSEMB1 file")
    header_len = len(RSEMB1_MAGIC) + 8
    if len(data) < header_len:
        raise CorruptFile(f"{values_path}: truncated header")
    n, d = struct.unpack_from("<II", data, len(RSEMB1_MAGIC))
    if len(data) != header_len + n * d * 4:
        raise DimensionInconsistent(
            f"{values_path}: payload size does not match n={n}, d={d}"
        )
    ids = [ln for ln in id_lines if ln]
    if len(ids) != n:
        raise DimensionInconsistent(f"{ids_path}: {len(ids)} ids for {n} rows")
    values = np.frombuffer(data, dtype="<f4", count=n * d,
                           offset=header_len).reshape(n, d).copy()
    lookup = manifest.by_id()
    labels = []
    for sid in ids:
        if sid not in lookup:
            raise UnknownId(f"id {sid!r} not present in manifest {manifest.name!r}")
        labels.append(lookup[sid].label)
    return FeatureMatrix(values=values, ids=ids, labels=labels)


# filter bank persistence, format RSRCF1: magic, u32 F, u32 c, u32 k,
# u64 seed, u8 init_mode (0 random / 1 empirical), weights then biases
# as little-endian float32

def save_bank(bank: RcfBank, path: str | Path) -> None:
    mode = 0 if bank.init_mode == "random" else 1
    try:
        with open(path, "wb") as f:
            f.write(RSRCF1_MAGIC)
            f.write(struct.pack("<IIIQB", bank.num_features, bank.in_channels,
                                bank.kernel_size, bank.seed, mode))
            f.write(np.ascontiguousarray(bank.weights, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(bank.biases, dtype="<f4").tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write bank: {e}") from e


def load_bank(path: str | Path) -> RcfBank:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read bank: {e}") from e
    if not data.startswith(RSRCF1_MAGIC):
        raise MagicMismatch(f"{path}: not an RSRCF1 file")
    header_len = len(RSRCF1_MAGIC) + struct.calcsize("<IIIQB")
    if len(data) < header_len:
        raise CorruptFile(f"{path}: truncated header")
    features, c, k, seed, mode = struct.unpack_from("<IIIQB", data, len(RSRCF1_MAGIC))
    n_filters = features // 2
    w_count = n_filters * c * k * k
    expected = header_len + (w_count + n_filters) * 4
    if len(data) != expected:
        raise CorruptFile(f"{path}: size {len(data)} != expected {expected}")
    weights = np.frombuffer(data, dtype="<f4", count=w_count,
                            offset=header_len).reshape(n_filters, c, k, k).copy()
    biases = np.frombuffer(data, dtype="<f4", count=n_filters,
                           offset=header_len + w_count * 4).copy()
    return RcfBank(weights=weights, biases=biases, seed=seed,
                   init_mode="random" if mode == 0 else "empirical")
