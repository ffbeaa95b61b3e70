"""Integer pixel translation of perturbations, and its adjoint.

Offsets are (i, j) = (horizontal, vertical): i moves content along the last
axis, j along the next-to-last. Vacated pixels are zero-filled — a shifted
perturbation contributes nothing where none existed. Whole-pixel shifts
only; no interpolation.
"""
from __future__ import annotations

import numpy as np


class OffsetRangeError(ValueError):
    """Offset magnitude reaches or exceeds the image extent."""


def _check_offsets(shape, i, j):
    if len(shape) < 2:
        raise ValueError(f"translate: need at least 2 axes, got shape {tuple(shape)}")
    H, W = shape[-2], shape[-1]
    if abs(i) >= W or abs(j) >= H:
        raise OffsetRangeError(
            f"offset ({i}, {j}) out of range for image extent {H}x{W}"
        )


def translate(delta, i, j):
    """Shifts `delta` by i pixels horizontally and j vertically.

    out[..., y, x] = delta[..., y - j, x - i] where in bounds, else 0.
    Always returns a fresh array, also at (0, 0).
    """
    delta = np.asarray(delta)
    i, j = int(i), int(j)
    _check_offsets(delta.shape, i, j)
    H, W = delta.shape[-2], delta.shape[-1]
    out = np.zeros_like(delta)
    dst_y = slice(max(j, 0), H + min(j, 0))
    src_y = slice(max(-j, 0), H + min(-j, 0))
    dst_x = slice(max(i, 0), W + min(i, 0))
    src_x = slice(max(-i, 0), W + min(-i, 0))
    out[..., dst_y, dst_x] = delta[..., src_y, src_x]
    return out


def translate_adjoint(g, i, j):
    """Transpose of translate: <translate(a,i,j), b> == <a, translate_adjoint(b,i,j)>."""
    return translate(g, -int(i), -int(j))
