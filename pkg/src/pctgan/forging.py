"""Synthetic die-forging sequences.

A process starts from a tapered cylindrical billet with a rounded top, standing
on the bottom anvil, and applies ``N`` compression stages.  Each stage scales heights
by ``lam`` and radii by ``c * (1 + kappa * 4 xi (1 - xi))`` where ``xi`` is the
relative height of a material point (invariant under every stage) and ``c`` is
solved so the solid-of-revolution volume is unchanged.

Images follow one convention throughout: column ``x`` is the radius band
``[x, x + 1)`` measured from the axis of revolution, row ``i`` is the height
band ``[H - 1 - i, H - i)`` so the anvil is the bottom row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .labels import TimingLabel, make_timing_label

IMAGE_SIZE = 64
N_CHANNELS = 5
_QUAD_X, _QUAD_W = np.polynomial.legendre.leggauss(160)
_QUAD_X = 0.5 * (_QUAD_X + 1.0)
_QUAD_W = 0.5 * _QUAD_W


class GenerationError(RuntimeError):
    """A process could not be generated (e.g. the shape left the raster)."""


def _bulge(xi):
    return 4.0 * xi * (1.0 - xi)


class Profile:
    """Half cross-section described by its height and a radius-vs-height function."""

    height: float

    def radius(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class CallableProfile(Profile):
    height: float
    fn: Callable[[np.ndarray], np.ndarray]

    def radius(self, z):
        z = np.asarray(z, dtype=np.float64)
        return np.where((z >= 0) & (z <= self.height), np.maximum(self.fn(z), 0.0), 0.0)


@dataclass(frozen=True)
class Stage:
    lam: float    # height ratio
    kappa: float  # barrel amplitude
    c: float      # volume-preserving radial scale


@dataclass(frozen=True)
class BilletProfile(Profile):
    """Billet after a sequence of compression stages.

    ``radius0`` is the initial radius at mid-height, ``taper`` tilts the
    initial side wall: ``R0(xi) = radius0 * (1 + taper * (0.5 - xi))``, and
    ``dome`` rounds off the top ``dome`` fraction of the height with an
    elliptical cap.
    """

    radius0: float
    height0: float
    taper: float = 0.0
    dome: float = 0.0
    stages: tuple[Stage, ...] = ()

    @property
    def height(self) -> float:
        h = self.height0
        for st in self.stages:
            h *= st.lam
        return h

    @property
    def height_ratio(self) -> float:
        return self.height / self.height0

    def initial_radius(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        r = self.radius0 * (1.0 + self.taper * (0.5 - xi))
        if self.dome > 0:
            q = np.clip((xi - (1.0 - self.dome)) / self.dome, 0.0, 1.0)
            r = r * np.sqrt(1.0 - q * q)
        return r

    def radial_factor(self, xi):
        f = np.ones_like(np.asarray(xi, dtype=np.float64))
        for st in self.stages:
            f = f * (st.c * (1.0 + st.kappa * _bulge(xi)))
        return f

    def radius(self, z):
        z = np.asarray(z, dtype=np.float64)
        h = self.height
        if h <= 0:
            return np.zeros_like(z)
        xi = z / h
        inside = (xi >= 0) & (xi <= 1)
        xi_c = np.clip(xi, 0.0, 1.0)
        return np.where(inside, self.initial_radius(xi_c) * self.radial_factor(xi_c), 0.0)

    def material_map(self, r_ref, xi):
        """Current position of the material point with initial radius ``r_ref`` at relative height ``xi``."""
        xi = np.asarray(xi, dtype=np.float64)
        return np.asarray(r_ref) * self.radial_factor(xi), xi * self.height

    def same_billet(self, other: "BilletProfile") -> bool:
        return ((self.radius0, self.height0, self.taper, self.dome)
                == (other.radius0, other.height0, other.taper, other.dome))

    def volume(self) -> float:
        """Continuous solid-of-revolution volume by Gauss-Legendre quadrature."""
        r = self.initial_radius(_QUAD_X) * self.radial_factor(_QUAD_X)
        return float(np.pi * self.height * np.sum(_QUAD_W * r * r))

    def with_stage(self, lam: float, kappa: float) -> "BilletProfile":
        """Append a stage, solving the radial scale that conserves volume."""
        if lam <= 0:
            raise GenerationError(f"height ratio must be positive, got {lam}")
        base = self.initial_radius(_QUAD_X) * self.radial_factor(_QUAD_X)
        prev = np.sum(_QUAD_W * base ** 2)
        new = np.sum(_QUAD_W * (base * (1.0 + kappa * _bulge(_QUAD_X))) ** 2)
        c = 1.0 if kappa == 0 and lam == 1 else float(np.sqrt(prev / (lam * new)))
        return replace(self, stages=self.stages + (Stage(float(lam), float(kappa), c),))


def _pixel_centers(size: int):
    x = np.arange(size) + 0.5
    z = (size - 1 - np.arange(size)) + 0.5
    return x[None, :], z[:, None]


def rasterize_profile(profile: Profile, size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary ``{0, 255}`` image; a pixel is on iff its centre lies inside the profile."""
    x, z = _pixel_centers(size)
    inside = (z < profile.height) & (x < profile.radius(z))
    return np.where(inside, 255.0, 0.0).astype(np.float32)


def solid_volume(shape: np.ndarray) -> float:
    """Volume swept by rotating the white pixels about the left edge (column 0)."""
    img = np.asarray(shape)
    if img.ndim != 2:
        raise ValueError(f"shape image must be 2-D, got {img.shape}")
    vals = np.unique(img)
    if not np.all(np.isin(vals, (0, 255))):
        raise ValueError(f"shape image is not binary {{0, 255}}: found values {vals[:6]}")
    cols = np.count_nonzero(img == 255, axis=0)
    x = np.arange(img.shape[1])
    return float(np.pi * np.sum(cols * (2 * x + 1)))


def splat_max_abs(rows, cols, values, size: int = IMAGE_SIZE) -> np.ndarray:
    """Scatter point values onto a grid keeping, per pixel, the value of largest magnitude.

    Ties between ``+a`` and ``-a`` resolve to ``+a``.  Pixels without points are 0.
    """
    rows, cols = np.asarray(rows, int), np.asarray(cols, int)
    values = np.asarray(values, np.float64)
    flat = rows * size + cols
    best = np.zeros(size * size)
    np.maximum.at(best, flat, np.abs(values))
    keep = np.abs(values) == best[flat]
    out = np.full(size * size, -np.inf)
    np.maximum.at(out, flat[keep], values[keep])
    out[np.isinf(out)] = 0.0
    return out.reshape(size, size)


def compute_physics_channels(before: BilletProfile, after: BilletProfile,
                             e_toy: float = 1.0, size: int = IMAGE_SIZE) -> np.ndarray:
    """Radial/axial stress and strain of the deformation ``before -> after``.

    Returns ``[4, size, size]``: radial stress, axial stress, radial strain,
    axial strain.  Strains are logarithmic principal stretches of the material
    map, stresses follow ``e_toy * strain``; both vanish outside the material.
    """
    if not before.same_billet(after):
        raise GenerationError("profiles do not share a material parameterization")
    if after.height <= 0 or before.height <= 0:
        raise GenerationError("degenerate (zero-height) profile has no invertible map")
    x, z = _pixel_centers(size)
    mask = rasterize_profile(after, size) > 0
    xi = np.clip(np.broadcast_to(z / after.height, (size, size)), 0.0, 1.0)
    fa, fb = after.radial_factor(xi), before.radial_factor(xi)
    if np.any(fa[mask] <= 0) or np.any(fb[mask] <= 0):
        raise GenerationError("non-invertible radial map")
    eps_r = np.where(mask, np.log(fa / fb), 0.0)
    eps_z = np.where(mask, np.log(after.height / before.height), 0.0)
    out = np.stack([e_toy * eps_r, e_toy * eps_z, eps_r, eps_z])
    return out.astype(np.float32)


@dataclass(frozen=True)
class ForgingParams:
    n_sub: int = 3
    steps_range: tuple[int, int] = (20, 35)
    radius_range: tuple[float, float] = (18.0, 22.0)
    height_range: tuple[float, float] = (56.0, 63.0)
    taper_range: tuple[float, float] = (0.15, 0.3)
    ratio_range: tuple[float, float] = (0.8, 0.9)
    bulge_range: tuple[float, float] = (0.05, 0.3)
    dome_range: tuple[float, float] = (0.15, 0.3)
    e_toy: float = 1.0
    size: int = IMAGE_SIZE
    orientation: str = "continuous"

    @classmethod
    def identity(cls, **kw) -> "ForgingParams":
        """No deformation at all: every frame equals the billet."""
        return cls(ratio_range=(1.0, 1.0), bulge_range=(0.0, 0.0), **kw)


@dataclass
class Frame:
    channels: np.ndarray  # [5, size, size]; shape in {0,255} when raw
    timing: TimingLabel
    step_index: int


@dataclass
class ForgingProcess:
    sub_processes: list[list[Frame]]
    stages: list[tuple[float, float]]
    seed: int
    billet: BilletProfile
    profiles: list[BilletProfile] = field(default_factory=list)

    @property
    def frames(self) -> list[Frame]:
        """Unique frames in step order (shared boundary frames appear once)."""
        out = list(self.sub_processes[0])
        for sub in self.sub_processes[1:]:
            out.extend(sub[1:])
        return out

    @property
    def n_steps(self) -> int:
        return len(self.frames) - 1

    @property
    def boundaries(self) -> list[int]:
        """Global step index of the first frame of every sub-process, plus the last step."""
        b = [0]
        for sub in self.sub_processes:
            b.append(b[-1] + len(sub) - 1)
        return b

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        frames = self.frames
        return (np.stack([f.channels for f in frames]).astype(np.float32),
                np.stack([f.timing.values for f in frames]))


def generate_process(seed: int, params: ForgingParams = ForgingParams()) -> ForgingProcess:
    """Deterministically generate one process from ``seed``."""
    rng = np.random.default_rng(seed)
    N = params.n_sub
    lo, hi = params.steps_range
    steps = [int(s) for s in rng.integers(lo, hi + 1, size=N)]
    radius0 = float(rng.uniform(*params.radius_range))
    height0 = float(rng.uniform(*params.height_range))
    taper = float(rng.uniform(*params.taper_range)) * (1.0 if rng.random() < 0.5 else -1.0)
    dome = float(rng.uniform(*params.dome_range))
    stages = [(float(rng.uniform(*params.ratio_range)), float(rng.uniform(*params.bulge_range)))
              for _ in range(N)]
    billet = BilletProfile(radius0, height0, taper, dome)

    def render(profile: BilletProfile, step: int) -> np.ndarray:
        if profile.height > params.size:
            raise GenerationError(f"step {step}: height {profile.height:.2f} exceeds raster")
        rmax = float(np.max(profile.radius(np.linspace(0, profile.height, 513))))
        if rmax >= params.size:
            raise GenerationError(f"step {step}: radius {rmax:.2f} exceeds raster")
        shape = rasterize_profile(profile, params.size)
        phys = compute_physics_channels(billet, profile, params.e_toy, params.size)
        return np.concatenate([shape[None], phys]).astype(np.float32)

    subs: list[list[Frame]] = []
    profiles: list[BilletProfile] = []
    current = billet
    channels = render(current, 0)
    step = 0
    for k, (lam, kappa) in enumerate(stages):
        n = k + 1
        S = steps[k]
        start = current
        frames = [Frame(channels.copy(), make_timing_label(n, 0, S, N, params.orientation), step)]
        if k == 0:
            profiles.append(start)
        for s in range(1, S + 1):
            theta = s / S
            prof = start.with_stage(1.0 - theta * (1.0 - lam), theta * kappa)
            step += 1
            channels = render(prof, step)
            frames.append(Frame(channels, make_timing_label(n, s, S, N, params.orientation), step))
            profiles.append(prof)
            current = prof
        subs.append(frames)
    return ForgingProcess(subs, stages, int(seed), billet, profiles)


@dataclass(frozen=True)
class NormalizationStats:
    """Clip thresholds (99.7th percentile of |value| inside material) per physics channel."""

    thresholds: tuple[float, ...]
    percentile: float = 99.7


def fit_normalization(frames: np.ndarray, percentile: float = 99.7) -> NormalizationStats:
    """``frames``: raw ``[T, 5, H, W]`` stack (any number of processes concatenated)."""
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    mask = frames[:, 0] > 0
    thr = []
    for ch in range(1, frames.shape[1]):
        vals = np.abs(frames[:, ch][mask]).astype(np.float64)
        thr.append(float(np.percentile(vals, percentile)) if vals.size else 0.0)
    return NormalizationStats(tuple(thr), percentile)


def apply_normalization(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Shape ``0 -> -1, 255 -> 1``; physics clipped at the threshold and scaled to [-1, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.empty_like(frames)
    out[:, 0] = frames[:, 0] / 127.5 - 1.0
    for i, t in enumerate(stats.thresholds):
        if t > 0:
            out[:, i + 1] = np.clip(frames[:, i + 1], -t, t) / t
        else:
            out[:, i + 1] = 0.0
    return out.astype(np.float32)


def normalize_channels(processes: Sequence[ForgingProcess], stats: NormalizationStats | None = None):
    """Normalize the frame stacks of ``processes``; fits ``stats`` when not given."""
    if not processes:
        raise ValueError("cannot normalize an empty dataset")
    stacks = [p.arrays()[0] for p in processes]
    if stats is None:
        stats = fit_normalization(np.concatenate(stacks))
    return [apply_normalization(s, stats) for s in stacks], stats
