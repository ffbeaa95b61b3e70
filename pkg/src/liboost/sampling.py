"""Probability distributions over translation offsets.

Magnitude-profile kinds (uniform / normal / logarithmic) draw a Chebyshev
magnitude m in {1..k} from a pmf, then a cell uniformly from the ring
{max(|i|,|j|) = m} (8m cells); "fullgrid" draws uniformly over the whole
(2k+1)^2 grid including (0, 0) and doubles as the exhaustive-mean oracle.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

UNIFORM = "uniform"
NORMAL = "normal"
LOGARITHMIC = "logarithmic"
FULL_GRID = "fullgrid"
KINDS = (UNIFORM, NORMAL, LOGARITHMIC, FULL_GRID)
OFFSET_MODES = ("ring", "per_axis")

# Shipped magnitude weights for bound 6, renormalized at construction.
_NORMAL_TABLE_K6 = (0.44, 0.30, 0.15, 0.06, 0.02, 0.01)
_LOG_TABLE_K6 = (0.39, 0.27, 0.16, 0.11, 0.05, 0.02)


def derive_rng(*keys):
    """Deterministic generator for a (seed, stream id, ...) tuple.

    String keys are hashed so named streams (e.g. per-purpose substreams)
    stay decoupled from integer indices.
    """
    entropy = []
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            k = int(key)
            if k < 0:
                raise ValueError(f"derive_rng: keys must be non-negative, got {k}")
            entropy.append(k)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _normal_pmf(k):
    if k == 6:
        raw = np.asarray(_NORMAL_TABLE_K6, dtype=np.float64)
    else:
        m = np.arange(1, k + 1, dtype=np.float64)
        raw = np.exp(-(m**2) / 8.0)
    return raw / raw.sum()


def _log_pmf(k):
    # Bound-6 table stretched through linear interpolation of its cumulative
    # curve; an extension beyond the tabulated bound, exact at k = 6.
    table = np.asarray(_LOG_TABLE_K6, dtype=np.float64)
    cum = np.concatenate(([0.0], np.cumsum(table)))
    knots = np.arange(7, dtype=np.float64)
    edges = np.interp(np.arange(k + 1, dtype=np.float64) * 6.0 / k, knots, cum)
    raw = np.diff(edges)
    return raw / raw.sum()


@dataclass(frozen=True)
class OffsetDistribution:
    """Immutable offset law: kind, bound k, and (for magnitude kinds) a pmf."""

    kind: str
    k: int
    offset_mode: str = "ring"
    magnitude_pmf: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"unknown offset_mode {self.offset_mode!r}; expected one of {OFFSET_MODES}")
        if self.kind == FULL_GRID:
            if self.k < 0:
                raise ValueError(f"fullgrid requires k >= 0, got {self.k}")
        elif self.k < 1:
            raise ValueError(f"{self.kind} requires k >= 1, got {self.k}")


def make_distribution(kind, k, offset_mode="ring"):
    kind = str(kind).lower()
    if kind == UNIFORM:
        pmf = np.full(k, 1.0 / k) if k >= 1 else np.empty(0)
    elif kind == NORMAL:
        pmf = _normal_pmf(k) if k >= 1 else np.empty(0)
    elif kind == LOGARITHMIC:
        pmf = _log_pmf(k) if k >= 1 else np.empty(0)
    elif kind == FULL_GRID:
        pmf = np.empty(0)
    else:
        raise ValueError(f"unknown distribution kind {kind!r}; expected one of {KINDS}")
    return OffsetDistribution(kind, int(k), offset_mode, tuple(float(p) for p in pmf))


def pmf(dist, m):
    """Probability of Chebyshev magnitude m under a magnitude-profile kind."""
    if dist.kind == FULL_GRID:
        raise ValueError("fullgrid has no magnitude pmf")
    if not 1 <= m <= dist.k:
        raise ValueError(f"magnitude {m} out of range [1, {dist.k}]")
    return dist.magnitude_pmf[m - 1]


def full_grid(k):
    """All (2k+1)^2 offsets of {-k..k}^2 in row-major order (i slowest)."""
    if k < 0:
        raise ValueError(f"full_grid: k must be >= 0, got {k}")
    return [(i, j) for i in range(-k, k + 1) for j in range(-k, k + 1)]


def ring_cells(m):
    """The 8m offsets with max(|i|,|j|) == m, in row-major order."""
    return [(i, j) for i in range(-m, m + 1) for j in range(-m, m + 1) if max(abs(i), abs(j)) == m]


_RING_CACHE = {}


def _ring(m):
    cells = _RING_CACHE.get(m)
    if cells is None:
        cells = ring_cells(m)
        _RING_CACHE[m] = cells
    return cells


def _draw_magnitude(dist, rng):
    u = rng.random()
    acc = 0.0
    for m, p in enumerate(dist.magnitude_pmf, start=1):
        acc += p
        if u < acc:
            return m
    return dist.k


def sample_offset(dist, rng):
    """Draws one (i, j) offset; deterministic given the generator state."""
    if dist.kind == FULL_GRID:
        side = 2 * dist.k + 1
        idx = int(rng.integers(side * side))
        return (idx // side - dist.k, idx % side - dist.k)
    if dist.offset_mode == "per_axis":
        mi = _draw_magnitude(dist, rng)
        si = 1 if rng.integers(2) else -1
        mj = _draw_magnitude(dist, rng)
        sj = 1 if rng.integers(2) else -1
        return (si * mi, sj * mj)
    m = _draw_magnitude(dist, rng)
    cells = _ring(m)
    return cells[int(rng.integers(len(cells)))]
