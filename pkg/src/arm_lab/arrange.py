"""Feature arrangement: parameter-free sub-pixel rearrangement.

Collapses channels into space so that values which originated at the same
spatial site land together in an r x r cluster, and pixels with the same
distance to the border (hence the same padding erosion) stay grouped at the
same depth of the output periphery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .tensor import Tensor


def max_shuffle_ratio(channels: int) -> int:
    """Largest r whose square divides the channel count."""
    if channels < 1:
        raise GeometryError(f"channel count must be >= 1, got {channels}")
    for r in range(math.isqrt(channels), 1, -1):
        if channels % (r * r) == 0:
            return r
    return 1


@dataclass(frozen=True)
class ShuffleSpec:
    """Geometry of one rearrangement: (C, H, W) -> (C/r^2, H*r, W*r)."""

    ratio: int
    in_channels: int
    in_height: int
    in_width: int

    def __post_init__(self):
        if self.ratio < 1:
            raise GeometryError(f"ratio must be >= 1, got {self.ratio}")
        if self.in_channels % (self.ratio * self.ratio) != 0:
            raise GeometryError(
                f"ratio^2={self.ratio ** 2} does not divide channel count {self.in_channels}"
            )

    @property
    def out_channels(self) -> int:
        return self.in_channels // (self.ratio * self.ratio)

    @property
    def out_height(self) -> int:
        return self.in_height * self.ratio

    @property
    def out_width(self) -> int:
        return self.in_width * self.ratio

    @property
    def cluster_size(self) -> int:
        return self.ratio

    @property
    def param_count(self) -> int:
        return 0


def _shuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    oc = c // (r * r)
    # (n, oc, dy, dx, h, w) -> (n, oc, h, dy, w, dx)
    v = a.reshape(n, oc, r, r, h, w)
    return v.transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    v = a.reshape(n, c, h, r, w, r)
    return v.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, ratio: int) -> Tensor:
    """Move input element (n, c*r^2 + dy*r + dx, i, j) to (n, c, i*r + dy, j*r + dx).

    Pure data movement: a bijection on elements, no arithmetic on values.
    """
    if x.ndim != 4:
        raise GeometryError(f"pixel_shuffle expects NCHW input, got rank {x.ndim}")
    c = x.shape[1]
    if ratio < 1:
        raise GeometryError(f"ratio must be >= 1, got {ratio}")
    if c % (ratio * ratio) != 0:
        raise GeometryError(f"ratio^2={ratio ** 2} does not divide channel count {c}")
    return Tensor(_shuffle_array(x.data, ratio))


def pixel_unshuffle(y: Tensor, ratio: int) -> Tensor:
    """Exact inverse of pixel_shuffle; also its adjoint, so it backpropagates it."""
    if y.ndim != 4:
        raise GeometryError(f"pixel_unshuffle expects NCHW input, got rank {y.ndim}")
    if ratio < 1:
        raise GeometryError(f"ratio must be >= 1, got {ratio}")
    _, _, h, w = y.shape
    if h % ratio != 0 or w % ratio != 0:
        raise GeometryError(
            f"spatial extents ({h}, {w}) are not divisible by ratio {ratio}"
        )
    return Tensor(_unshuffle_array(y.data, ratio))
