"""Timing and channel labels.

A timing label encodes the position of a step inside one of ``N`` consecutive
sub-sequences as an ``(N + 1)``-vector with two adjacent active entries.  With
the default ``"continuous"`` orientation the entry at ``n - 1`` fades out while
the entry at ``n`` fades in, so the last step of sub-sequence ``n`` and the
first step of sub-sequence ``n + 1`` get the same label.  ``"literal"`` swaps
the two entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

ORIENTATIONS = ("continuous", "literal")
CHANNEL_NAMES = ("shape", "radial_stress", "axial_stress", "radial_strain", "axial_strain")


@dataclass(frozen=True)
class TimingLabel:
    values: np.ndarray
    n: int
    s: int
    S: int

    @property
    def N(self) -> int:
        return self.values.size - 1


@dataclass(frozen=True)
class ChannelLabel:
    mask: np.ndarray

    @property
    def n_ch(self) -> int:
        return self.mask.size

    @property
    def indices(self) -> tuple[int, ...]:
        """Selected channels, 1-based."""
        return tuple(int(i) + 1 for i in np.flatnonzero(self.mask))

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def make_timing_label(n: int, s: int, S: int, N: int, orientation: str = "continuous") -> TimingLabel:
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0 < n <= N:
        raise ValueError(f"sub-sequence index n={n} outside 1..{N}")
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if not 0 <= s <= S:
        raise ValueError(f"step s={s} outside 0..{S}")
    v = np.zeros(N + 1)
    fade_out, fade_in = (S - s) / S, s / S
    if orientation == "continuous":
        v[n - 1], v[n] = fade_out, fade_in
    else:
        v[n - 1], v[n] = fade_in, fade_out
    return TimingLabel(v, n, s, S)


def make_channel_label(selected: Iterable[int], n_ch: int = 5) -> ChannelLabel:
    """Binary mask with ones at the 1-based ``selected`` channels."""
    sel = list(selected)
    if not sel:
        raise ValueError("channel selection must not be empty")
    if len(set(sel)) != len(sel):
        raise ValueError(f"duplicate channel indices in {sel}")
    bad = [i for i in sel if not 1 <= i <= n_ch]
    if bad:
        raise ValueError(f"channel indices {bad} outside 1..{n_ch}")
    mask = np.zeros(n_ch)
    mask[np.asarray(sel) - 1] = 1.0
    return ChannelLabel(mask)


def check_timing_label(label: TimingLabel, atol: float = 1e-6) -> None:
    """Raise ``ValueError`` if ``label`` breaks the sum/adjacency/range invariants."""
    v = label.values
    if abs(v.sum() - 1.0) > atol:
        raise ValueError(f"timing label sums to {v.sum()}")
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("timing label entries must lie in [0, 1]")
    nz = np.flatnonzero(v)
    if nz.size > 2 or (nz.size == 2 and nz[1] - nz[0] != 1):
        raise ValueError(f"timing label has non-adjacent active entries {nz.tolist()}")
