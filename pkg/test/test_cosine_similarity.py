"""
Tests for statesoup.state_store.cosine_similarity.
"""

import numpy as np
import pytest

from statesoup.errors import ShapeError
from statesoup.errors import ZeroNormError
from statesoup.state_store import cosine_similarity


@pytest.mark.parametrize('u,v,expected', [
    ([1.0, 0.0], [0.0, 2.0], 0.0),
    ([1.0, 2.0], [2.0, 4.0], 1.0),
    ([1.0, 2.0], [-1.0, -2.0], -1.0),
    ([1.0, 1.0], [1.0, 0.0], 0.5 ** 0.5),
])
def test_normal(u, v, expected):
    """
    Test for known angles.
    """
    assert cosine_similarity(u, v) == pytest.approx(expected, abs=1e-12)


def test_clipped():
    """
    Test that rounding never leaves [-1, 1].
    """
    vector = [0.1, 0.2, 0.3, 1e-9, 7.0]
    assert -1.0 <= cosine_similarity(vector, vector) <= 1.0


def test_zero_norm():
    """
    Test for a zero vector.
    """
    with pytest.raises(ZeroNormError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_shape_mismatch():
    """
    Test for vectors of different lengths.
    """
    with pytest.raises(ShapeError):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


@pytest.mark.parametrize('seed', range(5))
def test_symmetric_and_scale_free(seed):
    """
    Test symmetry and invariance to positive scaling.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=24)
    v = rng.normal(size=24)
    alpha = rng.uniform(1e-3, 1e3)
    assert cosine_similarity(u, v) == pytest.approx(
        cosine_similarity(v, u), abs=1e-12)
    assert cosine_similarity(alpha * u, v) == pytest.approx(
        cosine_similarity(u, v), abs=1e-12)
