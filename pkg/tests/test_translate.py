import numpy as np
import pytest

from liboost.translate import OffsetRangeError, translate, translate_adjoint


def all_offsets(k):
    return [(i, j) for i in range(-k, k + 1) for j in range(-k, k + 1)]


def test_identity_offset_is_exact_copy():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((2, 6, 6))
    out = translate(d, 0, 0)
    assert np.array_equal(out, d)
    assert out is not d


def test_single_pixel_moves_as_documented():
    d = np.zeros((1, 5, 5))
    d[0, 2, 1] = 7.0
    out = translate(d, 1, 0)
    assert out[0, 2, 2] == 7.0 and np.count_nonzero(out) == 1
    out = translate(d, 0, -2)
    assert out[0, 0, 1] == 7.0 and np.count_nonzero(out) == 1


def test_vacated_pixels_are_zero():
    d = np.ones((1, 4, 4))
    out = translate(d, 2, 1)
    assert np.all(out[0, :, :2] == 0) and np.all(out[0, 0, :] == 0)
    assert np.all(out[0, 1:, 2:] == 1)


def test_offset_out_of_range():
    d = np.zeros((1, 4, 4))
    with pytest.raises(OffsetRangeError):
        translate(d, 4, 0)
    with pytest.raises(OffsetRangeError):
        translate(d, 0, -4)
    translate(d, 3, -3)  # extremes inside the extent are fine


def test_linf_non_expansion():
    rng = np.random.default_rng(1)
    d = rng.standard_normal((1, 8, 8))
    for i, j in all_offsets(3):
        assert np.abs(translate(d, i, j)).max() <= np.abs(d).max()
    # equality when the peak stays in bounds: put the peak dead center
    d = np.zeros((1, 9, 9))
    d[0, 4, 4] = -3.0
    for i, j in all_offsets(3):
        assert np.abs(translate(d, i, j)).max() == 3.0


def test_linearity():
    rng = np.random.default_rng(2)
    d1 = rng.standard_normal((2, 7, 7))
    d2 = rng.standard_normal((2, 7, 7))
    for i, j in all_offsets(2):
        lhs = translate(2.5 * d1 - 1.5 * d2, i, j)
        rhs = 2.5 * translate(d1, i, j) - 1.5 * translate(d2, i, j)
        assert np.allclose(lhs, rhs, atol=0)


def test_interior_composition():
    rng = np.random.default_rng(3)
    d = np.zeros((1, 12, 12))
    d[0, 4:8, 4:8] = rng.standard_normal((4, 4))  # support >= 4 px from borders
    for i1, j1 in all_offsets(2):
        for i2, j2 in all_offsets(2):
            once = translate(d, i1 + i2, j1 + j2)
            twice = translate(translate(d, i1, j1), i2, j2)
            assert np.array_equal(once, twice)


def test_adjoint_identity_exact():
    """<translate(a,i,j), b> == <a, translate_adjoint(b,i,j)> exactly.

    Both sides are the same multiset of pixel products, only indexed
    differently, so the order-insensitive fsum makes them identical floats.
    """
    import math

    rng = np.random.default_rng(4)
    for trial in range(30):
        a = rng.standard_normal((2, 8, 8))
        b = rng.standard_normal((2, 8, 8))
        i, j = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
        lhs = math.fsum((translate(a, i, j) * b).ravel())
        rhs = math.fsum((a * translate_adjoint(b, i, j)).ravel())
        assert lhs == rhs


def test_adjoint_at_identity():
    g = np.random.default_rng(5).standard_normal((1, 6, 6))
    assert np.array_equal(translate_adjoint(g, 0, 0), g)


def test_adjoint_after_translate_masks_borders():
    """Round trip restores interior pixels and zeroes a border band."""
    rng = np.random.default_rng(6)
    d = rng.standard_normal((1, 8, 8))
    for k in range(4):
        for i, j in all_offsets(k):
            if max(abs(i), abs(j)) != k:
                continue
            back = translate_adjoint(translate(d, i, j), i, j)
            for y in range(8):
                for x in range(8):
                    # pixels that survive the round trip are those whose
                    # translated position stayed on the image
                    survives = 0 <= y + j < 8 and 0 <= x + i < 8
                    expected = d[0, y, x] if survives else 0.0
                    assert back[0, y, x] == expected


def test_batch_axes_supported():
    rng = np.random.default_rng(7)
    batch = rng.standard_normal((4, 2, 6, 6))
    out = translate(batch, 1, -1)
    for b in range(4):
        assert np.array_equal(out[b], translate(batch[b], 1, -1))
