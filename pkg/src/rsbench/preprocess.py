"""Resize and normalization steps applied before feature extraction.

Resampling is bilinear with half-pixel centers and edge clamping (the
align-corners-false convention), no antialiasing prefilter. Four
normalization families are supported: min-max (per-image-per-channel or
fixed range), channel-wise standardization, reflectance scaling, and
percentile clipping. Pipelines are ordered lists of these steps.

Masked pixels never enter normalization statistics and come out as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    ChannelCountMismatch,
    ConfigError,
    EmptyInput,
    MaskedResizeUnsupported,
    PipelineStepError,
)
from .raster import RasterImage

# the conventional natural-image standardization preset, for [0,1]-scaled RGB
IMAGENET_RGB_MEANS = (0.485, 0.456, 0.406)
IMAGENET_RGB_STDS = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ResizeSpec:
    out_height: int
    out_width: int

    def __post_init__(self):
        if self.out_height < 1 or self.out_width < 1:
            raise ValueError("resize target must be >= 1 in both axes")


@dataclass(frozen=True)
class MinMaxNormalize:
    """Affine map to [0,1]; per-image-per-channel when lo/hi are None."""

    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if (self.lo is None) != (self.hi is None):
            raise ValueError("fixed-range minmax needs both lo and hi")
        if self.lo is not None and not (self.lo < self.hi):
            raise ValueError("minmax range requires lo < hi")


@dataclass(frozen=True)
class Standardize:
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds must have equal length")
        if any(s <= 0 for s in self.stds):
            raise ValueError("stds must all be > 0")


@dataclass(frozen=True)
class Reflectance:
    divisor: float = 10000.0

    def __post_init__(self):
        if self.divisor <= 0:
            raise ValueError("divisor must be > 0")


@dataclass(frozen=True)
class PercentileClip:
    lo_pct: float = 2.0
    hi_pct: float = 98.0

    def __post_init__(self):
        if not (0 <= self.lo_pct < self.hi_pct <= 100):
            raise ValueError("need 0 <= lo_pct < hi_pct <= 100")


Step = Union[ResizeSpec, MinMaxNormalize, Standardize, Reflectance, PercentileClip]
Pipeline = Sequence[Step]


def percentile(values: Sequence[float] | np.ndarray, q: float) -> float:
    """Linear-interpolation percentile of a non-empty finite sequence."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("percentile of empty sequence")
    if not (0 <= q <= 100):
        raise ValueError(f"percentile q must be in [0, 100], got {q}")
    return float(np.percentile(arr, q, method="linear"))


def resize_bilinear(image: RasterImage, spec: ResizeSpec) -> RasterImage:
    """Resample each channel independently with half-pixel-center bilinear.

    Source coordinate for output index d is (d + 0.5) * in/out - 0.5; the
    two nearest source indices contribute with linear weights and are
    clamped to the valid range at the edges.
    """
    if image.nodata_mask is not None and image.nodata_mask.any():
        raise MaskedResizeUnsupported("resize of images with nodata is unsupported")
    c, in_h, in_w = image.data.shape
    out_h, out_w = spec.out_height, spec.out_width
    if (in_h, in_w) == (out_h, out_w):
        return RasterImage(data=image.data.copy(), band_names=image.band_names,
                           source_bit_depth=image.source_bit_depth)

    def axis_weights(n_in: int, n_out: int):
        s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(s).astype(np.int64)
        frac = s - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        return lo, hi, frac

    ry0, ry1, fy = axis_weights(in_h, out_h)
    rx0, rx1, fx = axis_weights(in_w, out_w)

    src = image.data.astype(np.float64)
    # rows first, then columns; separable because the kernel is
    rows = src[:, ry0, :] * (1.0 - fy)[None, :, None] + src[:, ry1, :] * fy[None, :, None]
    out = rows[:, :, rx0] * (1.0 - fx)[None, None, :] + rows[:, :, rx1] * fx[None, None, :]
    return RasterImage(data=out.astype(np.float32), band_names=image.band_names,
                       source_bit_depth=image.source_bit_depth)


def normalize(image: RasterImage, spec: Step) -> RasterImage:
    """Apply one normalization step; masked pixels are excluded from
    statistics and set to 0 in the output."""
    data = image.data.astype(np.float64)
    c = data.shape[0]
    mask = image.nodata_mask  # True = nodata

    if isinstance(spec, Reflectance):
        out = data / spec.divisor
    elif isinstance(spec, Standardize):
        if len(spec.means) != c:
            raise ChannelCountMismatch(
                f"standardize has {len(spec.means)} channel stats, image has {c}"
            )
        means = np.asarray(spec.means, dtype=np.float64)[:, None, None]
        stds = np.asarray(spec.stds, dtype=np.float64)[:, None, None]
        out = (data - means) / stds
    elif isinstance(spec, MinMaxNormalize):
        if spec.lo is not None:
            out = np.clip((data - spec.lo) / (spec.hi - spec.lo), 0.0, 1.0)
        else:
            lo, hi = _channel_range(data, mask)
            out = _rescale_unit(data, lo, hi)
    elif isinstance(spec, PercentileClip):
        lo = np.empty(c)
        hi = np.empty(c)
        for ch in range(c):
            vals = data[ch][~mask] if mask is not None else data[ch].ravel()
            if vals.size == 0:
                lo[ch], hi[ch] = 0.0, 0.0
                continue
            lo[ch] = np.percentile(vals, spec.lo_pct, method="linear")
            hi[ch] = np.percentile(vals, spec.hi_pct, method="linear")
        clipped = np.clip(data, lo[:, None, None], hi[:, None, None])
        out = _rescale_unit(clipped, lo, hi)
    else:
        raise TypeError(f"not a normalization step: {type(spec).__name__}")

    if mask is not None:
        out = out.copy()
        out[:, mask] = 0.0
    return RasterImage(data=out.astype(np.float32), band_names=image.band_names,
                       nodata_mask=None if mask is None else mask.copy(),
                       source_bit_depth=image.source_bit_depth)


def _channel_range(data: np.ndarray, mask: np.ndarray | None):
    c = data.shape[0]
    lo = np.empty(c)
    hi = np.empty(c)
    for ch in range(c):
        vals = data[ch][~mask] if mask is not None else data[ch].ravel()
        if vals.size == 0:
            lo[ch], hi[ch] = 0.0, 0.0
        else:
            lo[ch], hi[ch] = vals.min(), vals.max()
    return lo, hi


def _rescale_unit(data: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Map [lo, hi] -> [0, 1] per channel; degenerate ranges map to zeros."""
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = (data - lo[:, None, None]) / safe[:, None, None]
    out[span == 0] = 0.0
    return out


def apply_pipeline(image: RasterImage, pipeline: Pipeline) -> RasterImage:
    """Apply steps strictly in order; the empty pipeline is the identity."""
    out = image
    for i, step in enumerate(pipeline):
        try:
            if isinstance(step, ResizeSpec):
                out = resize_bilinear(out, step)
            else:
                out = normalize(out, step)
        except Exception as e:
            raise PipelineStepError(i, str(e)) from e
    return out


# config-file step records, e.g. {op: "reflectance", divisor: 10000}

def parse_step(record: dict) -> Step:
    if not isinstance(record, dict) or "op" not in record:
        raise ConfigError(f"pipeline step must be a mapping with an 'op' key: {record!r}")
    rec = dict(record)
    op = rec.pop("op")
    try:
        if op == "resize":
            step: Step = ResizeSpec(out_height=int(rec.pop("height")),
                                    out_width=int(rec.pop("width")))
        elif op == "minmax":
            lo = rec.pop("lo", None)
            hi = rec.pop("hi", None)
            step = MinMaxNormalize(lo=None if lo is None else float(lo),
                                   hi=None if hi is None else float(hi))
        elif op == "standardize":
            if rec.pop("preset", None) == "imagenet":
                step = Standardize(means=IMAGENET_RGB_MEANS, stds=IMAGENET_RGB_STDS)
            elif "stats_file" in rec:
                step = load_stats_preset(rec.pop("stats_file"))
            else:
                step = Standardize(means=tuple(float(v) for v in rec.pop("means")),
                                   stds=tuple(float(v) for v in rec.pop("stds")))
        elif op == "reflectance":
            step = Reflectance(divisor=float(rec.pop("divisor", 10000.0)))
        elif op == "percentile_clip":
            step = PercentileClip(lo_pct=float(rec.pop("lo", 2.0)),
                                  hi_pct=float(rec.pop("hi", 98.0)))
        else:
            raise ConfigError(f"unknown pipeline op {op!r}")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad {op!r} step {record!r}: {e}") from e
    if rec:
        raise ConfigError(f"unknown keys {sorted(rec)} in {op!r} step")
    return step


def parse_pipeline(records: Sequence[dict]) -> list[Step]:
    return [parse_step(r) for r in records]


def step_to_record(step: Step) -> dict:
    """Inverse of parse_step, used for config hashing and results metadata."""
    if isinstance(step, ResizeSpec):
        return {"op": "resize", "height": step.out_height, "width": step.out_width}
    if isinstance(step, MinMaxNormalize):
        rec = {"op": "minmax"}
        if step.lo is not None:
            rec.update(lo=step.lo, hi=step.hi)
        return rec
    if isinstance(step, Standardize):
        return {"op": "standardize", "means": list(step.means), "stds": list(step.stds)}
    if isinstance(step, Reflectance):
        return {"op": "reflectance", "divisor": step.divisor}
    if isinstance(step, PercentileClip):
        return {"op": "percentile_clip", "lo": step.lo_pct, "hi": step.hi_pct}
    raise TypeError(f"not a pipeline step: {type(step).__name__}")


def load_stats_preset(path: str | Path) -> Standardize:
    """Read a channel,mean,std CSV written by the stats command."""
    import csv as _csv

    means: list[float] = []
    stds: list[float] = []
    with open(path, newline="") as f:
        reader = _csv.reader(f)
        header = next(reader, None)
        if header != ["channel", "mean", "std"]:
            raise ConfigError(f"{path}: expected header channel,mean,std")
        for row in reader:
            if not row:
                continue
            means.append(float(row[1]))
            stds.append(float(row[2]))
    if not means:
        raise ConfigError(f"{path}: no channel statistics")
    return Standardize(means=tuple(means), stds=tuple(stds))
