"""Cyclic rotation groups and their actions on images and lifted feature fields.

Array conventions used across the package:

* planar image: ``(H, W, C)``, batched ``(N, H, W, C)``; a bare ``(H, W)`` grid
  is accepted wherever an image is.
* feature field: ``(H, W, m, C)``, batched ``(N, H, W, m, C)``; axis ``-2`` is
  the group axis.

Row index ``i`` grows downward, so a positive angle turns the array
counter-clockwise as displayed (``np.rot90`` direction).  Rotations are about
the grid center ``((H-1)/2, (W-1)/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class RotationGroup:
    """The cyclic group of ``m`` planar rotations by multiples of ``2*pi/m``."""

    m: int
    angles: tuple[float, ...] = field(init=False, repr=False)
    matrices: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"group order must be a positive integer, got {self.m!r}")
        angles = tuple(2 * math.pi * k / self.m for k in range(self.m))
        mats = tuple(
            np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
            for a in angles
        )
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "matrices", mats)

    def __len__(self):
        return self.m

    def compose(self, j: int, k: int) -> int:
        return (j + k) % self.m

    def inverse(self, k: int) -> int:
        return (-k) % self.m

    def quarter_turns(self, k: int) -> int | None:
        """Number of 90 degree turns equal to element ``k``, or None if off-grid."""
        self._check_index(k)
        if (4 * k) % self.m == 0:
            return (4 * k // self.m) % 4
        return None

    def _check_index(self, k):
        if not 0 <= k < self.m:
            raise ValueError(f"group index {k} outside [0, {self.m})")


def _spatial_axes(x: np.ndarray, field_like: bool) -> tuple[int, int]:
    if x.ndim == 2:
        return (0, 1)
    return (-4, -3) if field_like else (-3, -2)


def _rotate_grid(x, theta, axes):
    """Bilinear rotation of the two ``axes`` by ``theta`` with zero fill."""
    a0, a1 = (ax % x.ndim for ax in axes)
    moved = np.moveaxis(x, (a0, a1), (0, 1))
    h, w = moved.shape[:2]
    if h != w:
        raise ValueError(f"rotation by {theta:.6g} rad needs a square grid, got {h}x{w}")
    c = (h - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    # output (x, y) = R(theta) @ source (x, y) with x = j - c, y = c - i
    xo, yo = jj - c, c - ii
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    xs = cos_t * xo + sin_t * yo
    ys = -sin_t * xo + cos_t * yo
    coords = np.stack([c - ys, xs + c])
    flat = moved.reshape(h, w, -1)
    out = np.empty(flat.shape, dtype=np.result_type(x.dtype, np.float32))
    for s in range(flat.shape[-1]):
        out[..., s] = ndimage.map_coordinates(flat[..., s], coords, order=1,
                                              mode="grid-constant", cval=0.0)
    out = out.reshape(moved.shape)
    return np.moveaxis(out, (0, 1), (a0, a1)).astype(x.dtype, copy=False)


def rotate_image(img: np.ndarray, group: RotationGroup, k: int) -> np.ndarray:
    """Apply group element ``k`` to a planar image.

    Quarter-turn elements are exact index permutations; other elements resample
    bilinearly and need a square grid.
    """
    group._check_index(k)
    axes = _spatial_axes(img, field_like=False)
    q = group.quarter_turns(k)
    if q is not None:
        return np.rot90(img, q, axes=axes).copy()
    return _rotate_grid(img, group.angles[k], axes)


def rotate_field(f: np.ndarray, group: RotationGroup, k: int) -> np.ndarray:
    """Regular-representation action: rotate space by ``theta_k`` and shift the group axis by ``k``."""
    if f.ndim < 4:
        raise ValueError(f"feature field needs at least 4 axes, got shape {f.shape}")
    if f.shape[-2] != group.m:
        raise ValueError(f"field group order {f.shape[-2]} does not match group of order {group.m}")
    group._check_index(k)
    axes = _spatial_axes(f, field_like=True)
    q = group.quarter_turns(k)
    if q is not None:
        spatial = np.rot90(f, q, axes=axes)
    else:
        spatial = _rotate_grid(f, group.angles[k], axes)
    return np.roll(spatial, k, axis=-2)


def rotate_image_arbitrary(img: np.ndarray, theta: float) -> np.ndarray:
    """Bilinear rotation of a square image by ``theta`` radians; zero outside the support."""
    if theta == 0:
        return img.copy()
    return _rotate_grid(img, float(theta), _spatial_axes(img, field_like=False))


def interior_mask(size: int, margin: int, disk: bool) -> np.ndarray:
    """Boolean ``(size, size)`` mask of pixels kept by equivariance measurements.

    ``disk=True`` keeps pixels whose center lies within ``size/2 - margin`` of the
    grid center, which excludes the corners that an off-grid rotation fills with
    zeros.
    """
    if not disk:
        mask = np.zeros((size, size), dtype=bool)
        if size > 2 * margin:
            mask[margin:size - margin, margin:size - margin] = True
        return mask
    c = (size - 1) / 2.0
    ii, jj = np.mgrid[0:size, 0:size]
    r = np.hypot(ii - c, jj - c)
    return r <= size / 2.0 - margin - 0.5
