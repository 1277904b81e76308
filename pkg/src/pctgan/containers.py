"""Record containers (``PCTD`` datasets, ``PCTC`` checkpoints) and PNG export.

Layout, all integers little-endian ``u32``::

    magic[4] version count
    count x ( name_len name[name_len] ndim dims[ndim] payload[prod(dims)] as <f4 )
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

VERSION = 1
DATASET_MAGIC = b"PCTD"
CHECKPOINT_MAGIC = b"PCTC"


class ContainerError(ValueError):
    """Malformed, truncated, or mismatched container."""


def encode_records(magic: bytes, records: Iterable[tuple[str, np.ndarray]]) -> bytes:
    records = list(records)
    parts = [magic, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_records(blob: bytes, magic: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != magic:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError(f"truncated container while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"record {i} name length"))
        name = take(nlen, f"record {i} name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"record {name!r} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"record {name!r} dims"))
        n = int(np.prod(dims)) if ndim else 1
        payload = take(4 * n, f"record {name!r} payload")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise ContainerError(f"{len(blob) - pos} trailing bytes after {count} records")
    return out


def write_container(path, magic: bytes, records: Iterable[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode_records(magic, records))


def read_container(path, magic: bytes) -> "OrderedDict[str, np.ndarray]":
    return decode_records(Path(path).read_bytes(), magic)


def text_to_array(text: str) -> np.ndarray:
    """UTF-8 bytes as a float vector (exact for byte values)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def array_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float32).astype(np.uint8)).decode("utf-8")


def split_u32(value: int) -> tuple[float, float]:
    """Integer as two 16-bit halves, both exactly representable in float32."""
    value = int(value)
    if not 0 <= value < 2 ** 32:
        raise ValueError(f"value {value} does not fit in u32")
    return float(value >> 16), float(value & 0xFFFF)


def join_u32(hi: float, lo: float) -> int:
    return (int(hi) << 16) | int(lo)


# -- dataset files --------------------------------------------------------------

def save_sequence(path, frames: np.ndarray, timings: np.ndarray, boundaries,
                  seed: int, thresholds: Mapping | Iterable[float] = ()) -> None:
    """Write one process; ``meta`` = [N, n_frames, boundaries..., seed_hi, seed_lo, thresholds...]."""
    frames = np.asarray(frames)
    timings = np.asarray(timings)
    recs: list[tuple[str, np.ndarray]] = []
    for k in range(frames.shape[0]):
        recs.append((f"frame_{k}", frames[k]))
        recs.append((f"timing_{k}", timings[k]))
    N = timings.shape[1] - 1
    meta = [float(N), float(frames.shape[0]), *map(float, boundaries), *split_u32(seed), *map(float, thresholds)]
    recs.append(("meta", np.asarray(meta, dtype=np.float32)))
    write_container(path, DATASET_MAGIC, recs)


def load_sequence(path) -> dict:
    recs = read_container(path, DATASET_MAGIC)
    if "meta" not in recs:
        raise ContainerError(f"{path}: missing 'meta' record")
    meta = recs["meta"]
    N, T = int(meta[0]), int(meta[1])
    bounds = [int(b) for b in meta[2:2 + N + 1]]
    seed = join_u32(meta[3 + N], meta[4 + N])
    thresholds = tuple(float(t) for t in meta[5 + N:])
    try:
        frames = np.stack([recs[f"frame_{k}"] for k in range(T)])
        timings = np.stack([recs[f"timing_{k}"] for k in range(T)]).astype(np.float64)
    except KeyError as exc:
        raise ContainerError(f"{path}: missing record {exc.args[0]!r}") from None
    return {"frames": frames, "timings": timings, "boundaries": bounds, "seed": seed,
            "thresholds": thresholds}


# -- PNG --------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to [0, 255] with rounding."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")


def read_png(path, size: int | None = None) -> np.ndarray:
    """Grayscale PNG as floats in [-1, 1], optionally box-resampled to ``size``."""
    im = Image.open(path).convert("L")
    arr = np.asarray(im, dtype=np.float64) / 127.5 - 1.0
    if size is not None and arr.shape != (size, size):
        arr = block_resize(arr, size)
    return arr.astype(np.float32)


def block_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Average-pool the last two axes down to ``size`` (requires an integer factor)."""
    h, w = img.shape[-2:]
    if h % size or w % size:
        raise ValueError(f"cannot block-resize {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    lead = img.shape[:-2]
    return img.reshape(*lead, size, fh, size, fw).mean(axis=(-3, -1))


def export_frame_pngs(directory, frame: np.ndarray, prefix: str) -> list[Path]:
    """One 8-bit PNG per channel of a normalized ``[C, H, W]`` frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(frame.shape[0]):
        p = directory / f"{prefix}_ch{c}.png"
        write_png(p, frame[c])
        paths.append(p)
    return paths
