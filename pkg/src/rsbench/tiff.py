"""Minimal multiband TIFF decoder.

Covers the container variants found in remote-sensing classification
datasets: classic (non-Big) TIFF, uncompressed or deflate-compressed,
strip- or tile-organized, chunky or planar, 8/16/32-bit integer and
32/64-bit float samples, horizontal-differencing predictor. Anything
else must be converted to the toolkit raw tensor format first.

decode_tiff returns a (c, h, w) array in the file's native dtype plus
the declared bits per sample; rescaling never happens here.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptFile, UnsupportedFormat

# tag ids
_IMAGE_WIDTH = 256
_IMAGE_LENGTH = 257
_BITS_PER_SAMPLE = 258
_COMPRESSION = 259
_STRIP_OFFSETS = 273
_SAMPLES_PER_PIXEL = 277
_ROWS_PER_STRIP = 278
_STRIP_BYTE_COUNTS = 279
_PLANAR_CONFIG = 284
_PREDICTOR = 317
_TILE_WIDTH = 322
_TILE_LENGTH = 323
_TILE_OFFSETS = 324
_TILE_BYTE_COUNTS = 325
_SAMPLE_FORMAT = 339

# field type -> (struct code, byte size); only the types we read
_FIELD_TYPES = {
    1: ("B", 1),   # BYTE
    3: ("H", 2),   # SHORT
    4: ("I", 4),   # LONG
    6: ("b", 1),   # SBYTE
    8: ("h", 2),   # SSHORT
    9: ("i", 4),   # SLONG
    11: ("f", 4),  # FLOAT
}

_COMPRESSION_NONE = 1
_COMPRESSION_DEFLATE_ADOBE = 8
_COMPRESSION_DEFLATE_OLD = 32946


def _read_ifd(data: bytes, order: str) -> dict[int, list]:
    """Parse the first IFD into {tag: value list}."""
    (offset,) = struct.unpack(order + "I", data[4:8])
    if offset + 2 > len(data):
        raise CorruptFile("IFD offset past end of file")
    (n_entries,) = struct.unpack(order + "H", data[offset:offset + 2])
    entries: dict[int, list] = {}
    pos = offset + 2
    for _ in range(n_entries):
        if pos + 12 > len(data):
            raise CorruptFile("truncated IFD")
        tag, ftype, count = struct.unpack(order + "HHI", data[pos:pos + 8])
        pos += 12
        if ftype not in _FIELD_TYPES:
            continue  # rationals, ASCII etc. are metadata we never need
        code, size = _FIELD_TYPES[ftype]
        nbytes = size * count
        if nbytes <= 4:
            raw = data[pos - 4:pos - 4 + nbytes]
        else:
            (value_off,) = struct.unpack(order + "I", data[pos - 4:pos])
            if value_off + nbytes > len(data):
                raise CorruptFile(f"tag {tag} value past end of file")
            raw = data[value_off:value_off + nbytes]
        entries[tag] = list(struct.unpack(order + code * count, raw))
    return entries


def _tag(entries: dict[int, list], tag: int, default=None):
    values = entries.get(tag)
    if values is None:
        return default
    return values[0] if len(values) == 1 else values


def _dtype_for(sample_format: int, bits: int, order: str) -> np.dtype:
    prefix = "<" if order == "<" else ">"
    table = {
        (1, 8): "u1", (1, 16): "u2", (1, 32): "u4",
        (2, 8): "i1", (2, 16): "i2", (2, 32): "i4",
        (3, 32): "f4", (3, 64): "f8",
    }
    key = (sample_format, bits)
    if key not in table:
        raise UnsupportedFormat(
            f"sample format {sample_format} with {bits} bits per sample"
        )
    return np.dtype(prefix + table[key])


def _decompress(chunk: bytes, compression: int) -> bytes:
    if compression == _COMPRESSION_NONE:
        return chunk
    try:
        return zlib.decompress(chunk)
    except zlib.error as e:
        raise CorruptFile(f"deflate stream: {e}") from e


def _undo_predictor(block: np.ndarray) -> np.ndarray:
    # horizontal differencing: cumulative sum along the row axis, wrapping
    # in the native integer width
    return np.cumsum(block, axis=-2, dtype=block.dtype)


def decode_tiff(data: bytes) -> tuple[np.ndarray, int]:
    """Decode TIFF bytes to ((c, h, w) array in native dtype, bits per sample)."""
    if len(data) < 8:
        raise CorruptFile("file shorter than TIFF header")
    if data[:2] == b"II":
        order = "<"
    elif data[:2] == b"MM":
        order = ">"
    else:
        raise UnsupportedFormat("not a TIFF file")
    (magic,) = struct.unpack(order + "H", data[2:4])
    if magic == 43:
        raise UnsupportedFormat("BigTIFF requires conversion to the raw tensor format")
    if magic != 42:
        raise CorruptFile(f"bad TIFF magic {magic}")

    ifd = _read_ifd(data, order)
    width = _tag(ifd, _IMAGE_WIDTH)
    height = _tag(ifd, _IMAGE_LENGTH)
    if width is None or height is None:
        raise CorruptFile("missing image dimensions")
    spp = int(_tag(ifd, _SAMPLES_PER_PIXEL, 1))
    bits_list = ifd.get(_BITS_PER_SAMPLE, [1])
    if len(set(bits_list)) != 1:
        raise UnsupportedFormat("mixed bits-per-sample across bands")
    bits = int(bits_list[0])
    fmt_list = ifd.get(_SAMPLE_FORMAT, [1])
    if len(set(fmt_list)) != 1:
        raise UnsupportedFormat("mixed sample formats across bands")
    sample_format = int(fmt_list[0])
    compression = int(_tag(ifd, _COMPRESSION, 1))
    if compression not in (
        _COMPRESSION_NONE, _COMPRESSION_DEFLATE_ADOBE, _COMPRESSION_DEFLATE_OLD
    ):
        raise UnsupportedFormat(
            f"compression {compression}; only uncompressed and deflate are decoded"
        )
    planar = int(_tag(ifd, _PLANAR_CONFIG, 1))
    if planar not in (1, 2):
        raise UnsupportedFormat(f"planar configuration {planar}")
    predictor = int(_tag(ifd, _PREDICTOR, 1))
    if predictor not in (1, 2):
        raise UnsupportedFormat(f"predictor {predictor}")
    dtype = _dtype_for(sample_format, bits, order)
    if predictor == 2 and dtype.kind == "f":
        raise UnsupportedFormat("horizontal predictor on float samples")

    tiled = _TILE_OFFSETS in ifd
    if tiled:
        image = _decode_tiles(data, ifd, order, width, height, spp, dtype,
                              compression, planar, predictor)
    else:
        image = _decode_strips(data, ifd, order, width, height, spp, dtype,
                               compression, planar, predictor)
    # (h, w, c) -> (c, h, w)
    return np.ascontiguousarray(image.transpose(2, 0, 1)), bits


def _as_list(value) -> list[int]:
    return value if isinstance(value, list) else [value]


def _chunk_array(data: bytes, offset: int, nbytes: int, compression: int,
                 dtype: np.dtype, expected: int) -> np.ndarray:
    if offset + nbytes > len(data):
        raise CorruptFile("chunk data past end of file")
    raw = _decompress(data[offset:offset + nbytes], compression)
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size < expected:
        raise CorruptFile(
            f"chunk holds {arr.size} samples, expected at least {expected}"
        )
    return arr[:expected]


def _decode_strips(data, ifd, order, width, height, spp, dtype,
                   compression, planar, predictor) -> np.ndarray:
    offsets = _as_list(_tag(ifd, _STRIP_OFFSETS))
    counts = _as_list(_tag(ifd, _STRIP_BYTE_COUNTS))
    if offsets is None or offsets == [None] or counts == [None]:
        raise CorruptFile("missing strip layout tags")
    rows_per_strip = int(_tag(ifd, _ROWS_PER_STRIP, height))
    strips_per_plane = -(-height // rows_per_strip)
    n_planes = spp if planar == 2 else 1
    row_samples = width * (spp if planar == 1 else 1)
    if len(offsets) != strips_per_plane * n_planes or len(counts) != len(offsets):
        raise CorruptFile("strip count does not match image dimensions")

    out = np.empty((height, width, spp), dtype=dtype)
    for plane in range(n_planes):
        for s in range(strips_per_plane):
            idx = plane * strips_per_plane + s
            row0 = s * rows_per_strip
            nrows = min(rows_per_strip, height - row0)
            arr = _chunk_array(data, offsets[idx], counts[idx], compression,
                               dtype, nrows * row_samples)
            if planar == 1:
                block = arr.reshape(nrows, width, spp)
            else:
                block = arr.reshape(nrows, width, 1)
            if predictor == 2:
                block = _undo_predictor(block)
            if planar == 1:
                out[row0:row0 + nrows] = block
            else:
                out[row0:row0 + nrows, :, plane] = block[:, :, 0]
    return out


def _decode_tiles(data, ifd, order, width, height, spp, dtype,
                  compression, planar, predictor) -> np.ndarray:
    tile_w = int(_tag(ifd, _TILE_WIDTH))
    tile_h = int(_tag(ifd, _TILE_LENGTH))
    offsets = _as_list(_tag(ifd, _TILE_OFFSETS))
    counts = _as_list(_tag(ifd, _TILE_BYTE_COUNTS))
    tiles_across = -(-width // tile_w)
    tiles_down = -(-height // tile_h)
    tiles_per_plane = tiles_across * tiles_down
    n_planes = spp if planar == 2 else 1
    if len(offsets) != tiles_per_plane * n_planes or len(counts) != len(offsets):
        raise CorruptFile("tile count does not match image dimensions")

    samples_per_tile = tile_h * tile_w * (spp if planar == 1 else 1)
    out = np.empty((height, width, spp), dtype=dtype)
    for plane in range(n_planes):
        for t in range(tiles_per_plane):
            ty, tx = divmod(t, tiles_across)
            idx = plane * tiles_per_plane + t
            arr = _chunk_array(data, offsets[idx], counts[idx], compression,
                               dtype, samples_per_tile)
            if planar == 1:
                block = arr.reshape(tile_h, tile_w, spp)
            else:
                block = arr.reshape(tile_h, tile_w, 1)
            if predictor == 2:
                block = _undo_predictor(block)
            y0, x0 = ty * tile_h, tx * tile_w
            ny = min(tile_h, height - y0)
            nx = min(tile_w, width - x0)
            if planar == 1:
                out[y0:y0 + ny, x0:x0 + nx] = block[:ny, :nx]
            else:
                out[y0:y0 + ny, x0:x0 + nx, plane] = block[:ny, :nx, 0]
    return out
