"""Dataset adapters and synthetic data generation.

Folder-per-class archives (land-cover tiles, aerial scene datasets) are
indexed through their published split-list files; everything else enters
through the generic manifest CSV after conversion to the raw tensor
format. Sample order is always lexicographic by relative path so
manifests are reproducible across filesystems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChannelCountVaries,
    ClassCountMismatch,
    ConfigError,
    DataError,
    IoFailure,
    LayoutMismatch,
    UnknownSplitFile,
)
from .raster import (
    DatasetManifest,
    Label,
    RasterImage,
    Sample,
    load_manifest_csv,
    load_raster,
    save_manifest_csv,
    save_raster,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".jpg", ".jpeg", ".rsr")

# filename-list split files as commonly distributed for these archives
SPLIT_FILE_PREFIXES = {
    "eurosat": "eurosat",
    "ucm": "uc_merced",
    "resisc45": "resisc45",
}

FOLDER_ADAPTERS = tuple(SPLIT_FILE_PREFIXES)
ADAPTERS = FOLDER_ADAPTERS + ("generic-manifest", "synthetic")


@dataclass(frozen=True)
class AdapterSpec:
    dataset: str  # eurosat | ucm | resisc45 | generic-manifest | synthetic
    root: Path
    name: str | None = None
    task: str | None = None  # generic-manifest only; folder adapters are multiclass
    split_files: dict[str, Path] | None = None  # override shipped split lists
    verify: bool = False

    def __post_init__(self):
        if self.dataset not in ADAPTERS:
            raise ConfigError(f"unknown adapter {self.dataset!r}; choose from {ADAPTERS}")
        object.__setattr__(self, "root", Path(self.root))


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int
    num_classes: int
    channels: int
    height: int
    width: int
    task: str = "multiclass"
    seed: int = 0
    separation: float = 10.0

    def __post_init__(self):
        for name in ("n_per_class", "num_classes", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.task not in ("multiclass", "multilabel"):
            raise ValueError(f"task must be multiclass or multilabel, got {self.task!r}")


def build_manifest(spec: AdapterSpec) -> DatasetManifest:
    """Index the dataset at spec.root into a DatasetManifest."""
    if spec.dataset in FOLDER_ADAPTERS:
        manifest = _folder_class_manifest(spec)
    elif spec.dataset == "generic-manifest":
        if spec.task is None:
            raise ConfigError("generic-manifest adapter needs an explicit task")
        manifest = load_manifest_csv(spec.root / "manifest.csv", task=spec.task,
                                     name=spec.name or spec.root.name)
    else:  # synthetic: a generated root carrying its own task marker
        task_file = spec.root / "task.txt"
        if not task_file.exists():
            raise LayoutMismatch(f"{spec.root}: missing task.txt (not a generated root?)")
        manifest = load_manifest_csv(spec.root / "manifest.csv",
                                     task=task_file.read_text().strip(),
                                     name=spec.name or spec.root.name)
    if spec.verify:
        for s in manifest.samples:
            load_raster(s.image_path)
    return manifest


def _folder_class_manifest(spec: AdapterSpec) -> DatasetManifest:
    root = spec.root
    if not root.is_dir():
        raise LayoutMismatch(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    class_names = [d.name for d in class_dirs]
    if not class_names:
        raise LayoutMismatch(f"{root}: no class folders found")

    # basename -> (class index, relative path); split lists carry basenames
    index: dict[str, tuple[int, str]] = {}
    for ci, cdir in enumerate(class_dirs):
        for f in sorted(cdir.rglob("*")):
            if f.suffix.lower() not in IMAGE_SUFFIXES or not f.is_file():
                continue
            rel = f.relative_to(root).as_posix()
            if f.name in index:
                raise LayoutMismatch(
                    f"{root}: duplicate basename {f.name!r} across class folders"
                )
            index[f.name] = (ci, rel)
    if not index:
        raise LayoutMismatch(f"{root}: class folders contain no images")

    samples = []
    for split in ("train", "val", "test"):
        split_path = _find_split_file(spec, split)
        if split_path is None:
            if split == "val":
                continue
            raise UnknownSplitFile(
                f"{root}: no {split} split file; expected "
                f"{SPLIT_FILE_PREFIXES[spec.dataset]}-{split}.txt or {split}.txt"
            )
        for line in split_path.read_text().splitlines():
            name = line.strip()
            if not name:
                continue
            if name not in index:
                raise LayoutMismatch(
                    f"{split_path.name}: listed image {name!r} not found under {root}"
                )
            ci, rel = index[name]
            samples.append(Sample(id=rel, image_path=root / rel,
                                  label=Label.multiclass(ci), split=split))
    samples.sort(key=lambda s: s.id)

    classes_txt = root / "classes.txt"
    if classes_txt.exists():
        declared = [ln for ln in classes_txt.read_text().splitlines() if ln.strip()]
        if declared != class_names:
            raise ClassCountMismatch(
                f"{classes_txt} lists {len(declared)} classes, folders give "
                f"{len(class_names)}"
            )
    return DatasetManifest(
        name=spec.name or spec.dataset,
        task="multiclass",
        num_classes=len(class_names),
        class_names=class_names,
        samples=samples,
    )


def _find_split_file(spec: AdapterSpec, split: str) -> Path | None:
    if spec.split_files is not None:
        path = spec.split_files.get(split)
        if path is not None and not Path(path).exists():
            raise UnknownSplitFile(f"split file {path} does not exist")
        return None if path is None else Path(path)
    prefix = SPLIT_FILE_PREFIXES[spec.dataset]
    for candidate in (f"{prefix}-{split}.txt", f"{split}.txt"):
        path = spec.root / candidate
        if path.exists():
            return path
    return None


# synthetic data: per-class channel means separated by `separation` noise
# standard deviations, so KNN separability is controlled by one number

_NOISE_STD = 2.0
_BASE_VALUE = 50.0


def generate_synthetic(spec: SyntheticSpec, out_root: str | Path) -> DatasetManifest:
    """Write a deterministic synthetic dataset (raw tensor images plus
    manifest) under out_root and return its manifest.

    Class k shifts channel ch by separation * noise_std * perm[ch][k],
    where perm is a per-channel permutation of the class indices; in
    multilabel mode each sample carries 1-3 labels whose shifts add.
    """
    out_root = Path(out_root)
    images_dir = out_root / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {images_dir}: {e}") from e

    rng = np.random.default_rng(spec.seed)
    K = spec.num_classes
    perms = np.stack([rng.permutation(K) for _ in range(spec.channels)])  # (c, K)
    shift = spec.separation * _NOISE_STD

    n_total = spec.n_per_class * K
    samples = []
    sample_idx = 0
    for k in range(K):
        n_train = int(round(spec.n_per_class * 0.8))
        for j in range(spec.n_per_class):
            if spec.task == "multiclass":
                label = Label.multiclass(k)
                offsets = shift * perms[:, k]
            else:
                n_labels = int(rng.integers(1, min(3, K) + 1))
                chosen = rng.choice(K, size=n_labels, replace=False)
                bits = np.zeros(K, dtype=bool)
                bits[chosen] = True
                label = Label.multilabel(bits)
                offsets = shift * perms[:, chosen].sum(axis=1)
            noise = rng.standard_normal((spec.channels, spec.height, spec.width))
            data = (_BASE_VALUE + offsets[:, None, None]
                    + _NOISE_STD * noise).astype(np.float32)
            name = f"sample_{sample_idx:06d}.rsr"
            rel = f"images/{name}"
            save_raster(RasterImage(data=data), images_dir / name)
            split = "train" if j < n_train else "test"
            samples.append(Sample(id=rel, image_path=out_root / rel,
                                  label=label, split=split))
            sample_idx += 1
    assert sample_idx == n_total

    manifest = DatasetManifest(
        name=f"synthetic-{spec.task}-{spec.seed}",
        task=spec.task,
        num_classes=K,
        class_names=[f"class_{k}" for k in range(K)],
        samples=samples,
    )
    save_manifest_csv(manifest, out_root / "manifest.csv", out_root / "classes.txt")
    (out_root / "task.txt").write_text(spec.task + "\n")
    return manifest


class ChannelAccumulator:
    """Streaming per-channel mean/variance with pairwise merge, so stats
    are identical regardless of how work is partitioned."""

    def __init__(self, channels: int):
        self.channels = channels
        self.counts = np.zeros(channels, dtype=np.int64)
        self.means = np.zeros(channels, dtype=np.float64)
        self.m2 = np.zeros(channels, dtype=np.float64)

    def update(self, image: RasterImage) -> None:
        if image.channels != self.channels:
            raise ChannelCountVaries(
                f"image has {image.channels} channels, accumulator has {self.channels}"
            )
        mask = image.nodata_mask
        for ch in range(self.channels):
            vals = image.data[ch][~mask] if mask is not None else image.data[ch].ravel()
            if vals.size == 0:
                continue
            v = vals.astype(np.float64)
            self._merge_channel(ch, v.size, v.mean(), v.var() * v.size)

    def merge(self, other: "ChannelAccumulator") -> None:
        if other.channels != self.channels:
            raise ChannelCountVaries("accumulator channel counts differ")
        for ch in range(self.channels):
            self._merge_channel(ch, int(other.counts[ch]), other.means[ch],
                                other.m2[ch])

    def _merge_channel(self, ch: int, n: int, mean: float, m2: float) -> None:
        if n == 0:
            return
        n0 = self.counts[ch]
        delta = mean - self.means[ch]
        total = n0 + n
        self.means[ch] += delta * n / total
        self.m2[ch] += m2 + delta * delta * n0 * n / total
        self.counts[ch] = total

    def result(self) -> list[tuple[float, float]]:
        """(mean, population std) per channel."""
        out = []
        for ch in range(self.channels):
            if self.counts[ch] == 0:
                raise DataError(f"channel {ch} saw no pixels")
            out.append((float(self.means[ch]),
                        float(np.sqrt(self.m2[ch] / self.counts[ch]))))
        return out


def compute_channel_stats(manifest: DatasetManifest,
                          split: str = "train") -> list[tuple[float, float]]:
    """Per-channel (mean, population std) over all unmasked pixels of the
    chosen split."""
    samples = manifest.subset([split])
    if not samples:
        raise DataError(f"manifest {manifest.name!r} has no {split!r} samples")
    acc: ChannelAccumulator | None = None
    for s in samples:
        image = load_raster(s.image_path)
        if acc is None:
            acc = ChannelAccumulator(image.channels)
        acc.update(image)
    assert acc is not None
    return acc.result()


def save_stats_preset(stats: list[tuple[float, float]], path: str | Path) -> None:
    """Write a channel,mean,std CSV loadable as a standardization step;
    zero stds are emitted as 1 so the preset stays usable."""
    lines = ["channel,mean,std"]
    for ch, (mean, std) in enumerate(stats):
        if std == 0:
            logger.warning("channel %d has zero variance; emitting std=1", ch)
            std = 1.0
        lines.append(f"{ch},{mean!r},{std!r}")
    Path(path).write_text("\n".join(lines) + "\n")
