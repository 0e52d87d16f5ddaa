from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from mmsysid.distance import brute_force_distance, distance_transform, distance_transform_squared
from mmsysid.errors import EmptyMaskError


def test_single_pixel_pythagorean():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0, 0] = True
    assert distance_transform(mask)[3, 4] == 5.0


def test_zero_inside_mask():
    rng = np.random.default_rng(5)
    mask = rng.random((40, 30)) < 0.1
    d = distance_transform(mask)
    assert np.all(d[mask] == 0.0)
    assert np.all(d[~mask] >= 1.0)


def test_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        distance_transform(np.zeros((4, 4), dtype=bool))


def test_full_mask_is_zero():
    assert not distance_transform(np.ones((5, 7), dtype=bool)).any()


def test_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(2024)
    for k in range(100):
        mask = rng.random((32, 32)) < rng.uniform(0.005, 0.3)
        if not mask.any():
            mask[rng.integers(32), rng.integers(32)] = True
        np.testing.assert_array_equal(distance_transform(mask), brute_force_distance(mask))


@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_squared_distances_are_integers_matching_scipy(seed, h, w):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) < 0.15
    mask.flat[rng.integers(h * w)] = True
    d2 = distance_transform_squared(mask)
    np.testing.assert_array_equal(d2, np.round(d2))
    ref = ndimage.distance_transform_edt(~mask)
    np.testing.assert_allclose(np.sqrt(d2), ref, rtol=0, atol=1e-12)
