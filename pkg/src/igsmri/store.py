"""Byte-exact persistence: tensor containers, pattern files, PGM renders.

Tensor container layout (little-endian)::

    b"IGSD" | version u16 | dtype u8 | ndim u8 | dims u32 * ndim | payload

dtype codes: 1 = float32, 2 = uint8, 3 = complex64 (interleaved re, im
float32 pairs). Every file is written to a temporary sibling and renamed
into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .heads import DEFAULT_POOL_SHARPNESS, PARAM_NAMES, Head, HeadKind, param_shapes
from .phantom import PhantomSet
from .sampling import SamplingPattern

PathLike = Union[str, os.PathLike]

MAGIC = b"IGSD"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<c8")}


class StoreError(ValueError):
    """A file on disk does not match its declared format."""


def atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _coerce(grid: np.ndarray) -> tuple[np.ndarray, int]:
    grid = np.asarray(grid)
    if np.iscomplexobj(grid):
        return grid.astype("<c8"), 3
    if grid.dtype == np.uint8 or grid.dtype == np.bool_:
        return grid.astype("u1"), 2
    if np.issubdtype(grid.dtype, np.floating) or np.issubdtype(grid.dtype, np.integer):
        return grid.astype("<f4"), 1
    raise StoreError(f"unsupported dtype {grid.dtype}")


def encode_tensor(grid: np.ndarray) -> bytes:
    arr, code = _coerce(grid)
    if arr.ndim > 255:
        raise StoreError("too many dimensions")
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise StoreError(f"{source}: file too short for a tensor header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise StoreError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise StoreError(f"{source}: unsupported container version {version}")
    if code not in DTYPES:
        raise StoreError(f"{source}: unknown dtype code {code}")
    head_len = 8 + 4 * ndim
    if len(data) < head_len:
        raise StoreError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - head_len
    if actual != expected:
        raise StoreError(
            f"{source}: payload is {actual} bytes, expected {expected} for dims {dims}"
        )
    return np.frombuffer(data, dtype=dtype, offset=head_len).reshape(dims).copy()


def write_tensor(path: PathLike, grid: np.ndarray) -> None:
    atomic_write(path, encode_tensor(grid))


def read_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


# -- pattern files ------------------------------------------------------------


def format_pattern(pat: SamplingPattern) -> str:
    lines = [f"n_lines={pat.width} budget={pat.cardinality}"]
    lines += [str(i) for i in pat.indices]
    if pat.transition_log:
        lines.append("# transition: " + ",".join(str(i) for i in pat.transition_log))
    return "\n".join(lines) + "\n"


def parse_pattern(text: str, source: str = "<text>") -> SamplingPattern:
    rows = [r.strip() for r in text.splitlines() if r.strip()]
    if not rows:
        raise StoreError(f"{source}: empty pattern file")
    try:
        fields = dict(item.split("=", 1) for item in rows[0].split())
        n_lines, budget = int(fields["n_lines"]), int(fields["budget"])
    except (ValueError, KeyError):
        raise StoreError(f"{source}: bad header {rows[0]!r}") from None
    indices: list[int] = []
    transition: list[int] = []
    for row in rows[1:]:
        if row.startswith("#"):
            body = row.lstrip("#").strip()
            if body.startswith("transition:"):
                items = body.split(":", 1)[1].strip()
                transition = [int(v) for v in items.split(",") if v.strip()]
            continue
        try:
            idx = int(row)
        except ValueError:
            raise StoreError(f"{source}: bad line index {row!r}") from None
        if not 0 <= idx < n_lines:
            raise StoreError(f"{source}: line index {idx} outside [0, {n_lines})")
        if indices and idx <= indices[-1]:
            kind = "duplicate" if idx == indices[-1] else "unsorted"
            raise StoreError(f"{source}: {kind} line index {idx}")
        indices.append(idx)
    if len(indices) != budget:
        raise StoreError(f"{source}: header budget {budget} but {len(indices)} indices listed")
    try:
        return SamplingPattern.from_indices(n_lines, indices, transition)
    except ValueError as exc:
        raise StoreError(f"{source}: {exc}") from None


def write_pattern(path: PathLike, pat: SamplingPattern) -> None:
    atomic_write(path, format_pattern(pat).encode("ascii"))


def read_pattern(path: PathLike) -> SamplingPattern:
    return parse_pattern(Path(path).read_text(encoding="ascii"), str(path))


# -- images -------------------------------------------------------------------


def encode_pgm(img: np.ndarray, normalize: bool = False) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    if normalize:
        lo, hi = img.min(), img.max()
        scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    else:
        scaled = np.clip(img, 0.0, 1.0)
    # half-up rounding
    data = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_pgm(path: PathLike, img: np.ndarray, normalize: bool = False) -> None:
    atomic_write(path, encode_pgm(img, normalize))


def pattern_image(pat: SamplingPattern, height: int | None = None) -> np.ndarray:
    """Pattern drawn as a square image with sampled columns in white."""
    height = height or pat.width
    return np.tile(pat.as_float(), (height, 1))


# -- heads ----------------------------------------------------------------------


def write_head(path: PathLike, head: Head) -> None:
    """Flat float32 parameter vector plus a ``<path>.txt`` manifest record."""
    path = Path(path)
    shapes = param_shapes(head.kind, head.channels, head.kernel)
    flat = np.concatenate([np.ravel(head.params[n]) for n in PARAM_NAMES if n in shapes]) \
        if shapes else np.zeros(0)
    write_tensor(path, flat.astype(np.float32))
    record = [f"kind={head.kind.value}", f"channels={head.channels}", f"kernel={head.kernel}",
              f"pool_sharpness={head.pool_sharpness!r}"]
    record += [f"shape.{n}={'x'.join(str(d) for d in shapes[n]) or 'scalar'}" for n in shapes]
    atomic_write(Path(str(path) + ".txt"), ("\n".join(record) + "\n").encode("ascii"))


def read_head(path: PathLike) -> Head:
    path = Path(path)
    manifest = Path(str(path) + ".txt")
    if not manifest.exists():
        raise StoreError(f"{path}: missing head manifest {manifest}")
    fields = dict(
        line.split("=", 1) for line in manifest.read_text().splitlines() if "=" in line
    )
    kind = HeadKind(fields["kind"])
    channels, kernel = int(fields["channels"]), int(fields["kernel"])
    flat = read_tensor(path).astype(np.float64)
    if kind is HeadKind.IDENTITY:
        return Head(kind, channels, kernel)
    shapes = param_shapes(kind, channels, kernel)
    names = [n for n in PARAM_NAMES if n in shapes]
    sizes = [int(np.prod(shapes[n], dtype=np.int64)) for n in names]
    if flat.ndim != 1 or flat.size != sum(sizes):
        raise StoreError(f"{path}: expected {sum(sizes)} parameters, found {flat.size}")
    params, offset = {}, 0
    for name, size in zip(names, sizes):
        params[name] = flat[offset:offset + size].reshape(shapes[name])
        offset += size
    return Head(kind, channels, kernel, params, float(fields.get("pool_sharpness", DEFAULT_POOL_SHARPNESS)))


# -- datasets -------------------------------------------------------------------

DATASET_MANIFEST = "dataset.txt"


def write_dataset(directory: PathLike, data: PhantomSet, extra: dict | None = None) -> None:
    """``images.igsd`` (float32), ``masks.igsd`` (uint8) and a text manifest.

    The manifest starts with ``key=value`` lines (count, size, ...) followed
    by one ``index seed label lesion_pixels`` row per sample.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "images.igsd", data.images.astype(np.float32))
    write_tensor(directory / "masks.igsd", data.masks.astype(np.uint8))
    lines = [f"count={len(data)}", f"size={data.images.shape[-1]}"]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    lines.append("# index seed label lesion_pixels")
    for i in range(len(data)):
        lines.append(f"{i} {int(data.seeds[i])} {int(data.labels[i])} {int(data.masks[i].sum())}")
    atomic_write(directory / DATASET_MANIFEST, ("\n".join(lines) + "\n").encode("ascii"))


def read_dataset(directory: PathLike) -> PhantomSet:
    directory = Path(directory)
    manifest = directory / DATASET_MANIFEST
    if not manifest.exists():
        raise StoreError(f"{directory}: no {DATASET_MANIFEST} found")
    images = read_tensor(directory / "images.igsd").astype(np.float64)
    masks = read_tensor(directory / "masks.igsd")
    seeds, labels = [], []
    header: dict[str, str] = {}
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, value = line.split("=", 1)
            header[key] = value
            continue
        _, seed, label, _ = line.split()
        seeds.append(int(seed))
        labels.append(int(label))
    count = int(header.get("count", -1))
    if count <= 0:
        raise StoreError(f"{directory}: dataset is empty")
    if not (len(images) == len(masks) == len(labels) == count):
        raise StoreError(f"{directory}: manifest count {count} does not match stored arrays")
    return PhantomSet(images, masks, np.array(labels, dtype=np.int64),
                      np.array(seeds, dtype=np.int64))
