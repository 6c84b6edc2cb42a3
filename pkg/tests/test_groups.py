import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rediffuse.groups import (RotationGroup, interior_mask, rotate_field, rotate_image,
                              rotate_image_arbitrary)


def test_matrices_match_rotation_formula():
    g = RotationGroup(8)
    for k, a in enumerate(g.angles):
        assert a == 2 * math.pi * k / 8
        np.testing.assert_array_equal(g.matrices[k], [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    np.testing.assert_array_equal(g.matrices[0], np.eye(2))


@pytest.mark.parametrize("m", [1, 2, 3, 4, 6, 8])
def test_matrix_composition(m):
    g = RotationGroup(m)
    for j in range(m):
        for k in range(m):
            np.testing.assert_allclose(g.matrices[j] @ g.matrices[k], g.matrices[g.compose(j, k)], atol=1e-12)
        assert g.compose(j, g.inverse(j)) == 0


def test_bad_order_and_index():
    with pytest.raises(ValueError):
        RotationGroup(0)
    with pytest.raises(ValueError):
        rotate_image(np.zeros((2, 2)), RotationGroup(4), 4)


def test_quarter_turn_example():
    img = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(rotate_image(img, RotationGroup(4), 1), [[2, 4], [1, 3]])


def test_identity_and_order_four():
    rng = np.random.default_rng(0)
    img = rng.random((6, 6, 2))
    g = RotationGroup(4)
    np.testing.assert_array_equal(rotate_image(img, g, 0), img)
    out = img
    for _ in range(4):
        out = rotate_image(out, g, 1)
    np.testing.assert_array_equal(out, img)


def test_non_square_off_grid_rejected():
    with pytest.raises(ValueError):
        rotate_image(np.zeros((4, 6)), RotationGroup(8), 1)
    # quarter turns are fine on any shape
    assert rotate_image(np.zeros((4, 6)), RotationGroup(8), 2).shape == (6, 4)


def test_field_constant_over_space_shifts_group_axis():
    f = np.broadcast_to(np.array([1.0, 2.0, 3.0, 4.0])[:, None], (4, 4, 4, 1)).copy()
    out = rotate_field(f, RotationGroup(4), 1)
    np.testing.assert_array_equal(out[2, 1, :, 0], [4.0, 1.0, 2.0, 3.0])


def test_field_inverse_and_mismatch():
    rng = np.random.default_rng(1)
    f = rng.random((6, 6, 4, 3))
    g = RotationGroup(4)
    np.testing.assert_array_equal(rotate_field(rotate_field(f, g, 1), g, 3), f)
    np.testing.assert_array_equal(rotate_field(f, g, 0), f)
    with pytest.raises(ValueError):
        rotate_field(f, RotationGroup(8), 1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 6, 4, 2), elements=st.floats(-10, 10)),
       st.integers(0, 3), st.integers(0, 3))
def test_group_law_m4_bit_exact(f, j, k):
    g = RotationGroup(4)
    np.testing.assert_array_equal(rotate_field(rotate_field(f, g, k), g, j), rotate_field(f, g, g.compose(j, k)))


def test_group_law_m8():
    rng = np.random.default_rng(2)
    f = rng.random((16, 16, 8, 1))
    g = RotationGroup(8)
    for j, k in [(2, 2), (2, 4), (6, 4)]:
        np.testing.assert_array_equal(rotate_field(rotate_field(f, g, k), g, j),
                                      rotate_field(f, g, g.compose(j, k)))


def _smooth_field(n):
    x = (np.arange(n) - (n - 1) / 2) / n
    xx, yy = np.meshgrid(x, x, indexing="ij")
    base = np.cos(2 * np.pi * xx + 0.3) * np.sin(2 * np.pi * yy + 0.1)
    return np.stack([base * (g + 1) for g in range(8)], axis=-1)[..., None]


def test_group_law_m8_off_grid_converges():
    # two bilinear resamplings equal one only up to interpolation error, which
    # shrinks quadratically with the mesh
    g = RotationGroup(8)
    errs = []
    for n in (16, 32, 64):
        f = _smooth_field(n)
        a = rotate_field(rotate_field(f, g, 1), g, 1)
        b = rotate_field(f, g, 2)
        mask = interior_mask(n, 2, disk=True)
        errs.append(np.abs(a - b)[mask].max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < errs[0] / 8


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(-1e3, 1e3)), st.integers(1, 3))
def test_quarter_turns_preserve_sum_of_squares(img, k):
    out = rotate_image(img, RotationGroup(4), k)
    # exactly rounded sums so that summation order does not matter
    assert math.fsum((out ** 2).ravel()) == math.fsum((img ** 2).ravel())


def test_arbitrary_rotation_matches_grid_rotation():
    rng = np.random.default_rng(3)
    img = rng.random((9, 9, 2))
    g = RotationGroup(8)
    np.testing.assert_array_equal(rotate_image_arbitrary(img, 0.0), img)
    mask = interior_mask(9, 1, disk=False)
    for k in (2, 4, 6):
        a = rotate_image_arbitrary(img, g.angles[k])
        b = rotate_image(img, g, k)
        assert np.abs(a - b)[mask].max() <= 1e-6


def test_arbitrary_rotation_of_constant():
    img = np.full((12, 12), 0.7)
    out = rotate_image_arbitrary(img, 0.3)
    inner = interior_mask(12, 2, disk=True)
    np.testing.assert_allclose(out[inner], 0.7, atol=1e-12)


def test_interior_mask_shapes():
    assert interior_mask(8, 2, disk=False).sum() == 16
    disk = interior_mask(16, 3, disk=True)
    assert disk[8, 8] and not disk[0, 0]
