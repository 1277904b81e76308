"""Fréchet distance between Gaussian fits of handcrafted sequence features.

The embedding of a shape sequence (values in ``[-1, 1]``) has 64 entries:

* 12 = time mean and std of six per-frame moments (area fraction, centroid
  x/y, second central moments xx/yy/xy), computed on the mass ``(x + 1) / 2``;
* 9 = temporal-difference statistics (mean/std/max of the per-step mean
  absolute frame difference, plus the mean absolute step of each moment);
* 43 = a fixed seeded random projection of the 16-bin value histogram pooled
  over the whole sequence.

Sequences are first resampled to 16 frames by linear interpolation in time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ndgrad import no_grad

REPORT_HEADER = "dataset\tcond_mode\tnd\tfrechet_score"


class NumericalError(ArithmeticError):
    """A matrix function failed to converge."""


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.size


def resample_frames(frames: np.ndarray, n: int) -> np.ndarray:
    """Linear interpolation of ``frames[T, ...]`` onto ``n`` evenly spaced times."""
    T = frames.shape[0]
    pos = np.linspace(0.0, T - 1, n)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    a = (pos - lo).reshape(-1, *([1] * (frames.ndim - 1)))
    return frames[lo] + a * (frames[hi] - frames[lo])


def frame_moments(frames: np.ndarray) -> np.ndarray:
    """``[T, H, W]`` to ``[T, 6]``: area, cx, cy, mu20, mu02, mu11 (coordinates scaled to [0, 1))."""
    w = (np.clip(frames, -1.0, 1.0) + 1.0) * 0.5
    T, H, W = w.shape
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    mass = w.sum(axis=(1, 2))
    out = np.zeros((T, 6))
    out[:, 0] = mass / (H * W)
    nz = mass > 0
    if np.any(nz):
        wn = w[nz] / mass[nz, None, None]
        px = wn.sum(axis=1)
        py = wn.sum(axis=2)
        cx = px @ xs
        cy = py @ ys
        dx = xs[None, :] - cx[:, None]
        dy = ys[None, :] - cy[:, None]
        out[nz, 1] = cx
        out[nz, 2] = cy
        out[nz, 3] = np.sum(px * dx * dx, axis=1)
        out[nz, 4] = np.sum(py * dy * dy, axis=1)
        out[nz, 5] = np.einsum("tyx,ty,tx->t", wn, dy, dx)
    return out


class SequenceEmbedder:
    def __init__(self, n_frames: int = 16, bins: int = 16, hist_dim: int = 43, seed: int = 0):
        self.n_frames = n_frames
        self.bins = bins
        self.projection = np.random.default_rng(seed).standard_normal((bins, hist_dim)) / np.sqrt(bins)

    @property
    def dim(self) -> int:
        return 12 + 9 + self.projection.shape[1]

    def __call__(self, frames) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        if x.ndim != 3:
            raise ValueError(f"expected frames of shape [T, H, W] or [T, 1, H, W], got {np.shape(frames)}")
        if x.shape[0] < 2:
            raise ValueError(f"need at least 2 frames, got {x.shape[0]}")
        x = resample_frames(x, self.n_frames)
        mom = frame_moments(x)
        # centring on the first frame keeps the std exactly 0 for constant sequences
        pooled = np.concatenate([mom.mean(axis=0), (mom - mom[0]).std(axis=0)])
        step = np.abs(np.diff(x, axis=0)).mean(axis=(1, 2))
        mstep = np.abs(np.diff(mom, axis=0)).mean(axis=0)
        temporal = np.concatenate([[step.mean(), step.std(), step.max()], mstep])
        hist, _ = np.histogram(np.clip(x, -1.0, 1.0), bins=self.bins, range=(-1.0, 1.0))
        hist = hist / x.size
        return np.concatenate([pooled, temporal, hist @ self.projection])


def extract_sequence_features(frames, embedder: SequenceEmbedder | None = None) -> np.ndarray:
    return (embedder or SequenceEmbedder())(frames)


def fit_gaussian(features: Sequence[np.ndarray]) -> GaussianStats:
    """Sample mean and unbiased covariance."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors, got array of shape {X.shape}")
    mu = X.mean(axis=0)
    d = X - mu
    sigma = d.T @ d / (X.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T))


def psd_matrix_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; negative eigenvalues clamp to 0."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(A), initial=0.0)):
        raise ValueError("matrix is not symmetric")
    try:
        w, V = np.linalg.eigh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from None
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(r: GaussianStats, g: GaussianStats) -> float:
    if r.mu.shape != g.mu.shape or r.sigma.shape != g.sigma.shape:
        raise ValueError(f"dimension mismatch: {r.mu.shape} vs {g.mu.shape}")
    root_r = psd_matrix_sqrt(r.sigma)
    inner = root_r @ g.sigma @ root_r
    cross = np.trace(psd_matrix_sqrt(0.5 * (inner + inner.T)))
    diff = r.mu - g.mu
    d = float(diff @ diff + np.trace(r.sigma) + np.trace(g.sigma) - 2.0 * cross)
    return max(d, 0.0)


# -- model evaluation -------------------------------------------------------------

def contiguous_spans(boundaries: Sequence[int]) -> list[tuple[int, int]]:
    """Inclusive frame ranges ``[a, b]`` covering every run of consecutive sub-processes."""
    N = len(boundaries) - 1
    return [(boundaries[i], boundaries[j]) for i in range(N) for j in range(i + 1, N + 1)]


def predict_span(model, frames: np.ndarray, timings: np.ndarray, a: int, b: int,
                 chunk: int = 256) -> np.ndarray:
    """Shape channel predicted for every frame of ``[a, b]`` from the two end frames."""
    idx = np.arange(a, b + 1)
    begin = np.broadcast_to(frames[a, 0], (idx.size,) + frames.shape[2:])
    end = np.broadcast_to(frames[b, 0], (idx.size,) + frames.shape[2:])
    labels = np.stack([np.broadcast_to(timings[a], timings[idx].shape),
                       np.broadcast_to(timings[b], timings[idx].shape), timings[idx]], axis=1)
    model.eval()
    parts = []
    with no_grad():
        for s in range(0, idx.size, chunk):
            sl = slice(s, s + chunk)
            parts.append(model.encode_generate(begin[sl], end[sl], labels[sl]).data[:, 0])
    return np.concatenate(parts)


def real_and_generated_features(model, sequences, embedder: SequenceEmbedder | None = None):
    """``sequences`` holds dicts with normalized ``frames``, ``timings`` and ``boundaries``."""
    emb = embedder or SequenceEmbedder()
    real, gen = [], []
    for seq in sequences:
        frames, timings = seq["frames"], seq["timings"]
        for a, b in contiguous_spans(seq["boundaries"]):
            real.append(emb(frames[a:b + 1, 0]))
            if model is not None:
                gen.append(emb(predict_span(model, frames, timings, a, b)))
    return real, gen


def evaluate_model(model, sequences, embedder: SequenceEmbedder | None = None) -> float:
    """Fréchet score of ``model`` against held-out sequences; ``model=None`` scores real against real."""
    real, gen = real_and_generated_features(model, sequences, embedder)
    r = fit_gaussian(real)
    return frechet_distance(r, r if model is None else fit_gaussian(gen))


def format_report_row(dataset: str, cond_mode: str, nd: int, score: float) -> str:
    return f"{dataset}\t{cond_mode}\t{nd}\t{score:.6f}"
