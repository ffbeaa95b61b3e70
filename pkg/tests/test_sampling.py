import numpy as np
import pytest
from scipy import stats

from liboost import sampling

LOG_TABLE = (0.39, 0.27, 0.16, 0.11, 0.05, 0.02)
NORMAL_TABLE = (0.44, 0.30, 0.15, 0.06, 0.02, 0.01)


def empirical_magnitudes(dist, n, seed):
    rng = sampling.derive_rng(seed)
    mags = np.empty(n, dtype=np.int64)
    for idx in range(n):
        i, j = sampling.sample_offset(dist, rng)
        mags[idx] = max(abs(i), abs(j))
    return mags


def test_uniform_pmf_k6():
    dist = sampling.make_distribution("uniform", 6)
    for m in range(1, 7):
        assert sampling.pmf(dist, m) == pytest.approx(1 / 6, abs=1e-15)


def test_logarithmic_pmf_matches_table():
    dist = sampling.make_distribution("logarithmic", 6)
    total = sum(LOG_TABLE)
    for m, p in enumerate(LOG_TABLE, start=1):
        assert sampling.pmf(dist, m) == pytest.approx(p / total, abs=1e-12)


def test_normal_pmf_matches_renormalized_table():
    dist = sampling.make_distribution("normal", 6)
    total = sum(NORMAL_TABLE)  # tabulated values sum to 0.98
    assert total == pytest.approx(0.98, abs=1e-12)
    for m, p in enumerate(NORMAL_TABLE, start=1):
        assert sampling.pmf(dist, m) == pytest.approx(p / total, abs=1e-12)
    assert sampling.pmf(dist, 6) == pytest.approx(0.01 / 0.98, abs=1e-12)


@pytest.mark.parametrize("kind", ["uniform", "normal", "logarithmic"])
@pytest.mark.parametrize("k", [1, 2, 4, 6, 9])
def test_pmf_normalization(kind, k):
    dist = sampling.make_distribution(kind, k)
    assert abs(sum(dist.magnitude_pmf) - 1.0) < 1e-12
    assert all(p >= 0 for p in dist.magnitude_pmf)


def test_normal_generator_reproduces_table_within_tolerance():
    """The exp(-m^2/8) law stays within 0.01 of the bound-6 table."""
    m = np.arange(1, 7)
    law = np.exp(-(m**2) / 8.0)
    law /= law.sum()
    table = np.asarray(NORMAL_TABLE) / sum(NORMAL_TABLE)
    assert np.abs(law - table).max() < 0.01


def test_pmf_out_of_range():
    dist = sampling.make_distribution("uniform", 3)
    for m in (0, 4, -1):
        with pytest.raises(ValueError):
            sampling.pmf(dist, m)


def test_fullgrid_has_no_pmf():
    with pytest.raises(ValueError):
        sampling.pmf(sampling.make_distribution("fullgrid", 2), 1)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown distribution kind"):
        sampling.make_distribution("cauchy", 3)


def test_magnitude_kind_requires_positive_k():
    with pytest.raises(ValueError):
        sampling.make_distribution("uniform", 0)
    sampling.make_distribution("fullgrid", 0)  # grid degenerates to {(0,0)}


def test_full_grid_sizes():
    assert len(sampling.full_grid(1)) == 9
    assert len(sampling.full_grid(2)) == 25
    assert sampling.full_grid(0) == [(0, 0)]


def test_full_grid_row_major_order():
    assert sampling.full_grid(1) == [
        (-1, -1), (-1, 0), (-1, 1),
        (0, -1), (0, 0), (0, 1),
        (1, -1), (1, 0), (1, 1),
    ]


def test_ring_sizes():
    for m in (1, 2, 5):
        assert len(sampling.ring_cells(m)) == 8 * m


def test_fullgrid_sampling_uniform():
    dist = sampling.make_distribution("fullgrid", 1)
    rng = sampling.derive_rng(42)
    n = 100_000
    counts = {}
    for _ in range(n):
        o = sampling.sample_offset(dist, rng)
        counts[o] = counts.get(o, 0) + 1
    assert set(counts) == set(sampling.full_grid(1))
    for c in counts.values():
        assert abs(c / n - 1 / 9) < 0.01


@pytest.mark.parametrize("kind,table", [("logarithmic", LOG_TABLE), ("normal", NORMAL_TABLE), ("uniform", None)])
def test_empirical_ring_frequencies(kind, table):
    dist = sampling.make_distribution(kind, 6)
    mags = empirical_magnitudes(dist, 100_000, seed=7)
    assert mags.min() >= 1 and mags.max() <= 6
    for m in range(1, 7):
        expected = 1 / 6 if table is None else table[m - 1] / sum(table)
        assert abs(np.mean(mags == m) - expected) < 0.01


def test_magnitude_kinds_never_draw_zero():
    dist = sampling.make_distribution("logarithmic", 3)
    rng = sampling.derive_rng(3)
    for _ in range(2000):
        i, j = sampling.sample_offset(dist, rng)
        assert 1 <= max(abs(i), abs(j)) <= 3


def test_per_axis_mode_draws_nonzero_axes():
    dist = sampling.make_distribution("logarithmic", 4, offset_mode="per_axis")
    rng = sampling.derive_rng(4)
    for _ in range(2000):
        i, j = sampling.sample_offset(dist, rng)
        assert 1 <= abs(i) <= 4 and 1 <= abs(j) <= 4


def test_sampling_deterministic_per_seed():
    dist = sampling.make_distribution("normal", 5)
    a = [sampling.sample_offset(dist, sampling.derive_rng(9, n)) for n in range(50)]
    b = [sampling.sample_offset(dist, sampling.derive_rng(9, n)) for n in range(50)]
    assert a == b


def test_distinct_seeds_decorrelate():
    """Ring-magnitude counts from two seeds both pass a chi-square test."""
    dist = sampling.make_distribution("logarithmic", 6)
    expected = np.asarray(dist.magnitude_pmf) * 50_000
    for seed in (101, 202):
        mags = empirical_magnitudes(dist, 50_000, seed=seed)
        observed = np.asarray([np.sum(mags == m) for m in range(1, 7)])
        assert stats.chisquare(observed, expected).pvalue > 0.01


def test_ring_direction_uniform_within_magnitude():
    dist = sampling.make_distribution("uniform", 2)
    rng = sampling.derive_rng(11)
    cells = {}
    n = 80_000
    for _ in range(n):
        o = sampling.sample_offset(dist, rng)
        cells[o] = cells.get(o, 0) + 1
    for m in (1, 2):
        ring = sampling.ring_cells(m)
        probs = [cells.get(c, 0) / n for c in ring]
        # magnitude mass 1/2 split evenly over 8m ring cells
        assert max(abs(p - 0.5 / (8 * m)) for p in probs) < 0.01


def test_derive_rng_rejects_negative():
    with pytest.raises(ValueError):
        sampling.derive_rng(-1)
