import numpy as np
import pytest

from occfield.contraction import ContractionParams
from occfield.errors import InvalidParameterError
from occfield.geometry import Ray
from occfield.sampler import (distances_from_fractions, fractions_for, ray_bound, sample_count,
                              sample_ray, sample_rays)

PAPER = ContractionParams(2 / 3, (-40, -40, -3.2), (40, 40, 3.2))


def test_ray_bound_examples():
    assert ray_bound(np.array([1.0, 0, 0]), PAPER) == pytest.approx(40.0)
    assert ray_bound(np.array([0, 0, 1.0]), PAPER) == pytest.approx(3.2)
    d = np.array([0.3, -0.7, 0.2])
    assert ray_bound(5 * d, PAPER) == pytest.approx(ray_bound(d, PAPER))
    with pytest.raises(InvalidParameterError):
        ray_bound(np.zeros(3), PAPER)


def test_sample_count_examples():
    assert sample_count(40.0, 2 / 3, 0.4) == 300
    assert sample_count(3.2, 2 / 3, 0.4) == 24
    assert sample_count(1e-6, 2 / 3, 0.4) == 2
    with pytest.raises(InvalidParameterError):
        sample_count(1.0, 2 / 3, 0.0)


def test_seam_fraction_maps_to_bound():
    t = distances_from_fractions(np.array([2 / 3]), np.array(40.0), 2 / 3)
    assert t[0] == pytest.approx(40.0)


def test_inner_spacing_linear():
    u = np.array([0.1, 0.2, 0.3, 0.4])
    t = distances_from_fractions(u, np.array(40.0), 2 / 3)
    np.testing.assert_allclose(np.diff(t), 40 / (2 / 3) * 0.1)


def test_stratified_bins():
    rng = np.random.default_rng(0)
    u, mask = fractions_for(np.array([10, 4]), rng)
    assert mask.sum() == 14
    k = np.arange(10)
    assert ((u[0] >= np.maximum(k / 10, 1e-4)) & (u[0] <= (k + 1) / 10)).all()


def test_ray_samples_properties():
    s = sample_ray(Ray(np.zeros(3), np.array([1.0, 0.2, 0.0])), PAPER, 0.4, seed=3)
    assert s.count[0] >= 2
    t = s.t[0, : s.count[0]]
    assert (t > 0).all() and (np.diff(t) > 0).all()
    d = s.delta[0, : s.count[0]]
    assert (d >= 0).all()
    assert d[-1] == pytest.approx(d[-2])
    assert np.abs(s.contracted).max() < 1


def test_padding_and_determinism():
    o = np.zeros((3, 3))
    d = np.array([[1.0, 0, 0], [0, 0, 1.0], [1, 1, 0.1]])
    a = sample_rays(o, d, PAPER, 0.4, 5)
    b = sample_rays(o, d, PAPER, 0.4, 5)
    assert a.t.tobytes() == b.t.tobytes()
    assert a.count.tolist()[:2] == [300, 24]
    assert not a.mask[1, 24:].any() and (a.t[1, 24:] == 0).all()


def test_midpoint_mode_and_far_coverage():
    s = sample_rays(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), PAPER, 0.4, mode="midpoint")
    assert s.t[0, s.count[0] - 1] > 1e3 * 40 / 300
    with pytest.raises(InvalidParameterError):
        sample_rays(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), PAPER, 0.4, mode="bogus")


def test_strided_recomputes_intervals():
    s = sample_rays(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0.2, 1]]), PAPER, 0.4, 1)
    s4 = s.strided(4)
    assert s4.count[0] == 75
    t = s4.t[0, :75]
    np.testing.assert_allclose(s4.delta[0, :74], np.diff(t))
    assert s.strided(1) is s
