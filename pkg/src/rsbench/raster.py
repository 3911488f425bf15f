"""Canonical raster data model and decoding.

Everything downstream consumes a RasterImage: a channel-major float32
tensor holding the raw digital numbers of the source file. Decoding
never rescales; normalization is an explicit preprocessing step.

Supported on-disk formats: PNG, JPEG, multiband TIFF (see tiff.py for
the bounded TIFF scope) and the toolkit's own raw tensor format RSRAS1::

    b"RSRAS1\\n"  magic
    u32 c, u32 h, u32 w        little-endian
    u8 mask_flag               0 or 1
    c*h*w float32 payload      little-endian, channel-major
    h*w bytes 0/1 mask         only if mask_flag == 1
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tiff
from .errors import (
    BandCountZero,
    CorruptFile,
    DataError,
    IndexOutOfRange,
    IoFailure,
    UnsupportedFormat,
)

RSRAS1_MAGIC = b"RSRAS1\n"

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RasterImage:
    """A c x h x w float32 image with optional band names and nodata mask."""

    data: np.ndarray
    band_names: tuple[str, ...] | None = None
    nodata_mask: np.ndarray | None = None
    source_bit_depth: int | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"data must be (c, h, w), got shape {arr.shape}")
        c, h, w = arr.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)
        if self.band_names is not None:
            names = tuple(self.band_names)
            if len(names) != c:
                raise ValueError(f"{len(names)} band names for {c} channels")
            object.__setattr__(self, "band_names", names)
        if self.nodata_mask is not None:
            mask = np.ascontiguousarray(self.nodata_mask, dtype=bool)
            if mask.shape != (h, w):
                raise ValueError(f"mask shape {mask.shape} != image plane {(h, w)}")
            object.__setattr__(self, "nodata_mask", mask)
            valid = arr[:, ~mask] if mask.any() else arr
        else:
            valid = arr
        if valid.size and not np.isfinite(valid).all():
            raise ValueError("unmasked pixel values must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Label:
    """Multiclass (class index) or multilabel (bit vector) target."""

    task: str
    index: int | None = None
    bits: tuple[bool, ...] | None = None

    @staticmethod
    def multiclass(index: int) -> "Label":
        if index < 0:
            raise ValueError("class index must be >= 0")
        return Label(task="multiclass", index=int(index))

    @staticmethod
    def multilabel(bits: Sequence[bool]) -> "Label":
        return Label(task="multilabel", bits=tuple(bool(b) for b in bits))

    def validate(self, task: str, num_classes: int) -> None:
        if self.task != task:
            raise ValueError(f"label task {self.task!r} != dataset task {task!r}")
        if task == "multiclass":
            if self.index is None or not (0 <= self.index < num_classes):
                raise ValueError(f"class index {self.index} outside [0, {num_classes})")
        else:
            if self.bits is None or len(self.bits) != num_classes:
                raise ValueError("multilabel bit vector length != num_classes")


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: Path
    label: Label
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    """Sample index for one dataset: the contract between adapters and the runner."""

    name: str
    task: str
    num_classes: int
    class_names: list[str]
    samples: list[Sample] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in ("multiclass", "multilabel"):
            raise ValueError(f"task must be multiclass or multilabel, got {self.task!r}")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length != num_classes")
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            s.label.validate(self.task, self.num_classes)
        counts = self.split_counts()
        if counts["train"] == 0 or counts["test"] == 0:
            raise ValueError("manifest needs at least one train and one test sample")

    def split_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in SPLITS}
        for s in self.samples:
            counts[s.split] += 1
        return counts

    def subset(self, splits: Sequence[str]) -> list[Sample]:
        wanted = set(splits)
        return [s for s in self.samples if s.split in wanted]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


def load_raster(path: str | Path, decoder_hint: str | None = None) -> RasterImage:
    """Decode a raster file to float32 digital numbers, no rescaling.

    Format is sniffed from magic bytes unless decoder_hint is one of
    "rsras", "png", "jpeg", "tiff".
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    fmt = decoder_hint or _sniff_format(data, path)
    if fmt == "rsras":
        return _decode_rsras(data, path)
    if fmt in ("png", "jpeg"):
        return _decode_pil(data, path)
    if fmt == "tiff":
        try:
            arr, bits = tiff.decode_tiff(data)
        except (UnsupportedFormat, CorruptFile) as e:
            raise type(e)(f"{path}: {e}") from e
        if arr.shape[0] == 0:
            raise BandCountZero(str(path))
        return RasterImage(data=arr.astype(np.float32), source_bit_depth=bits)
    raise UnsupportedFormat(f"{path}: unrecognized format {fmt!r}")


def _sniff_format(data: bytes, path: Path) -> str:
    if data.startswith(RSRAS1_MAGIC):
        return "rsras"
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return "png"
    if data.startswith(b"\xff\xd8"):
        return "jpeg"
    if data[:2] in (b"II", b"MM"):
        return "tiff"
    raise UnsupportedFormat(f"{path}: no known magic bytes")


def _decode_pil(data: bytes, path: Path) -> RasterImage:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            bits = 16 if img.mode.startswith("I;16") else 8
            arr = np.asarray(img)
    except UnidentifiedImageError as e:
        raise CorruptFile(f"{path}: {e}") from e
    except OSError as e:
        raise CorruptFile(f"{path}: {e}") from e
    if arr.ndim == 2:
        arr = arr[None, :, :]
    elif arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    else:
        raise CorruptFile(f"{path}: unexpected array rank {arr.ndim}")
    if arr.shape[0] == 0:
        raise BandCountZero(str(path))
    return RasterImage(data=arr.astype(np.float32), source_bit_depth=bits)


def _decode_rsras(data: bytes, path: Path) -> RasterImage:
    header_len = len(RSRAS1_MAGIC) + 13
    if len(data) < header_len:
        raise CorruptFile(f"{path}: truncated RSRAS1 header")
    c, h, w, mask_flag = struct.unpack_from("<IIIB", data, len(RSRAS1_MAGIC))
    if c == 0:
        raise BandCountZero(str(path))
    if h == 0 or w == 0 or mask_flag not in (0, 1):
        raise CorruptFile(f"{path}: bad RSRAS1 header fields")
    payload_bytes = c * h * w * 4
    expected = header_len + payload_bytes + (h * w if mask_flag else 0)
    if len(data) != expected:
        raise CorruptFile(f"{path}: RSRAS1 size {len(data)} != expected {expected}")
    values = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=header_len)
    arr = values.reshape(c, h, w).copy()
    mask = None
    if mask_flag:
        mask_raw = np.frombuffer(data, dtype=np.uint8, count=h * w,
                                 offset=header_len + payload_bytes)
        mask = mask_raw.reshape(h, w).astype(bool)
    return RasterImage(data=arr, nodata_mask=mask)


def save_raster(image: RasterImage, path: str | Path) -> None:
    """Write the RSRAS1 raw tensor format; load_raster inverts it exactly."""
    path = Path(path)
    c, h, w = image.data.shape
    mask_flag = 1 if image.nodata_mask is not None else 0
    try:
        with open(path, "wb") as f:
            f.write(RSRAS1_MAGIC)
            f.write(struct.pack("<IIIB", c, h, w, mask_flag))
            f.write(np.ascontiguousarray(image.data, dtype="<f4").tobytes())
            if mask_flag:
                f.write(image.nodata_mask.astype(np.uint8).tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def select_bands(image: RasterImage, indices: Sequence[int]) -> RasterImage:
    """Reorder/subset channels; mask and bit depth carry over."""
    if len(indices) == 0:
        raise IndexOutOfRange("band index list is empty")
    c = image.channels
    for i in indices:
        if not (0 <= i < c):
            raise IndexOutOfRange(f"band index {i} outside [0, {c})")
    names = None
    if image.band_names is not None:
        names = tuple(image.band_names[i] for i in indices)
    return RasterImage(
        data=image.data[list(indices)].copy(),
        band_names=names,
        nodata_mask=None if image.nodata_mask is None else image.nodata_mask.copy(),
        source_bit_depth=image.source_bit_depth,
    )


# manifest CSV: header id,path,split,label; multilabel labels are
# semicolon-separated set-class indices; class names in classes.txt

def save_manifest_csv(manifest: DatasetManifest, csv_path: str | Path,
                      classes_path: str | Path | None = None) -> None:
    csv_path = Path(csv_path)
    if classes_path is None:
        classes_path = csv_path.parent / "classes.txt"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "path", "split", "label"])
        for s in manifest.samples:
            if manifest.task == "multiclass":
                label = str(s.label.index)
            else:
                label = ";".join(str(i) for i, b in enumerate(s.label.bits) if b)
            writer.writerow([s.id, str(s.image_path), s.split, label])
    Path(classes_path).write_text("".join(n + "\n" for n in manifest.class_names))


def load_manifest_csv(csv_path: str | Path, task: str,
                      classes_path: str | Path | None = None,
                      name: str | None = None) -> DatasetManifest:
    csv_path = Path(csv_path)
    if classes_path is None:
        classes_path = csv_path.parent / "classes.txt"
    classes_path = Path(classes_path)
    if not classes_path.exists():
        raise DataError(f"missing class names file {classes_path}")
    class_names = [ln for ln in classes_path.read_text().splitlines() if ln.strip()]
    num_classes = len(class_names)
    samples = []
    root = csv_path.parent
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["id", "path", "split", "label"]:
            raise DataError(f"{csv_path}: expected header id,path,split,label")
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{csv_path}: malformed row {row!r}")
            sid, rel, split, label_field = row
            try:
                if task == "multiclass":
                    label = Label.multiclass(int(label_field))
                else:
                    bits = [False] * num_classes
                    if label_field.strip():
                        for tok in label_field.split(";"):
                            idx = int(tok)
                            if not (0 <= idx < num_classes):
                                raise ValueError(f"class index {idx} out of range")
                            bits[idx] = True
                    label = Label.multilabel(bits)
            except ValueError as e:
                raise DataError(f"{csv_path}: bad label for {sid!r}: {e}") from e
            path = Path(rel)
            if not path.is_absolute():
                path = root / path
            samples.append(Sample(id=sid, image_path=path, label=label, split=split))
    return DatasetManifest(
        name=name or csv_path.stem,
        task=task,
        num_classes=num_classes,
        class_names=class_names,
        samples=samples,
    )
