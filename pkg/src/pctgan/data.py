"""Normalized sequence datasets in memory and on disk.

A sequence is a dict with ``frames`` (``[T, 5, S, S]`` float32 in ``[-1, 1]``),
``timings`` (``[T, N + 1]``), ``boundaries`` (inclusive step index of every
sub-process start plus the last step) and ``seed``.

A dataset directory holds one ``PCTD`` file per sequence and ``manifest.txt``::

    #pctgan-manifest<TAB>1
    image_size<TAB>16
    thresholds<TAB>t1<TAB>t2<TAB>t3<TAB>t4
    split<TAB>file<TAB>seed<TAB>n_frames
    train<TAB>train_000.pctd<TAB>1234<TAB>87
    ...
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import containers
from .forging import ForgingParams, GenerationError, NormalizationStats, generate_process, normalize_channels

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.txt"
MANIFEST_TAG = "#pctgan-manifest"


def process_seeds(seed: int, count: int, params: ForgingParams = ForgingParams()) -> list[int]:
    """``count`` process seeds drawn from ``seed``, skipping ones that fail to generate."""
    rng = np.random.default_rng(seed)
    out: list[int] = []
    tried = 0
    while len(out) < count:
        s = int(rng.integers(0, 2 ** 31))
        tried += 1
        if s in out:
            continue
        try:
            generate_process(s, params)
        except GenerationError:
            if tried > 100 * (count + 1):
                raise
            continue
        out.append(s)
    return out


def build_sequences(seeds: Sequence[int], image_size: int = 64, params: ForgingParams = ForgingParams(),
                    stats: NormalizationStats | None = None) -> tuple[list[dict], NormalizationStats]:
    """Generate, normalize and (optionally) block-downsample processes."""
    procs = [generate_process(s, params) for s in seeds]
    stacks, stats = normalize_channels(procs, stats)
    seqs = []
    for p, frames in zip(procs, stacks):
        if image_size != frames.shape[-1]:
            frames = containers.block_resize(frames, image_size)
        seqs.append({"frames": frames.astype(np.float32), "timings": p.arrays()[1],
                     "boundaries": p.boundaries, "seed": p.seed})
    return seqs, stats


def make_splits(seed: int, counts: dict[str, int], image_size: int = 64,
                params: ForgingParams = ForgingParams()) -> tuple[dict[str, list[dict]], NormalizationStats]:
    """Splits keyed by name; normalization is fitted on the training split only."""
    if counts.get("train", 0) < 1:
        raise ValueError("at least one training process is required")
    names = [n for n in SPLITS if counts.get(n, 0) > 0]
    seeds = process_seeds(seed, sum(counts[n] for n in names), params)
    out: dict[str, list[dict]] = {}
    pos = 0
    stats = None
    for name in names:
        chunk = seeds[pos:pos + counts[name]]
        pos += counts[name]
        out[name], stats = build_sequences(chunk, image_size, params, stats)
    return out, stats


def write_dataset(directory, splits: dict[str, list[dict]], stats: NormalizationStats) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_size = next(iter(splits.values()))[0]["frames"].shape[-1]
    lines = [f"{MANIFEST_TAG}\t1", f"image_size\t{image_size}",
             "thresholds\t" + "\t".join(repr(float(t)) for t in stats.thresholds),
             "split\tfile\tseed\tn_frames"]
    for name in SPLITS:
        for i, seq in enumerate(splits.get(name, [])):
            fname = f"{name}_{i:03d}.pctd"
            containers.save_sequence(directory / fname, seq["frames"], seq["timings"], seq["boundaries"],
                                     seq["seed"], stats.thresholds)
            lines.append(f"{name}\t{fname}\t{seq['seed']}\t{seq['frames'].shape[0]}")
    path = directory / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    rows = [ln.split("\t") for ln in path.read_text(encoding="utf-8").splitlines() if ln]
    if not rows or rows[0][0] != MANIFEST_TAG:
        raise ValueError(f"{path}: not a dataset manifest")
    info = {"image_size": None, "thresholds": (), "files": {n: [] for n in SPLITS}}
    for row in rows[1:]:
        if row[0] == "image_size":
            info["image_size"] = int(row[1])
        elif row[0] == "thresholds":
            info["thresholds"] = tuple(float(v) for v in row[1:])
        elif row[0] in SPLITS:
            info["files"][row[0]].append(row[1])
    return info


def load_split(directory, split: str) -> list[dict]:
    info = read_manifest(directory)
    out = []
    for fname in info["files"][split]:
        seq = containers.load_sequence(Path(directory) / fname)
        out.append(seq)
    return out


def iter_frames(seqs: Iterable[dict]):
    for seq in seqs:
        yield from seq["frames"]
