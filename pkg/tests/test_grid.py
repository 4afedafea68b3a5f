import numpy as np
import pytest

from occfield.contraction import ContractionParams, contract_point, invert_point
from occfield.errors import InvalidParameterError
from occfield.grid import (OccupancyGrid, activate, activation_grad, inside_dims_for,
                          inverse_activation, sigmoid)

from oracles import trilinear_literal

PARAMS = ContractionParams(2 / 3, (-4, -4, -1), (4, 4, 3))


def make(dims=(12, 12, 6), C=0, seed=0):
    g = OccupancyGrid.create(dims, PARAMS, C)
    rng = np.random.default_rng(seed)
    g.opacity_raw[:] = rng.normal(size=dims)
    if C:
        g.semantic_raw[:] = rng.normal(size=dims + (C,))
    return g


def test_inside_dims_and_voxel_size():
    assert inside_dims_for((300, 300, 24), 0.667) == (200, 200, 16)
    g = make()
    assert g.inside_dims == (8, 8, 4)
    np.testing.assert_allclose(g.voxel_size, [1.0, 1.0, 1.0])
    assert g.d_v == 1.0


def test_init_activation():
    for mode in ("weight", "density"):
        g = OccupancyGrid.create((4, 4, 4), PARAMS, mode=mode)
        np.testing.assert_allclose(activate(g.opacity_raw, mode), 0.01)


def test_activation_grad():
    x = np.linspace(-30, 30, 61)
    h = 1e-6
    for mode in ("weight", "density"):
        fd = (activate(x + h, mode) - activate(x - h, mode)) / (2 * h)
        np.testing.assert_allclose(activation_grad(x, mode), fd, atol=1e-8)
    assert inverse_activation(0.25, "weight") == pytest.approx(np.log(1 / 3))
    assert np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))).all()


def test_center_query_returns_stored_value():
    g = make()
    idx = np.array([[3, 5, 2], [0, 0, 0], [11, 11, 5]])
    op, _ = g.sample_trilinear(g.index_to_contracted(idx))
    np.testing.assert_allclose(op, g.opacity_raw[tuple(idx.T)])


def test_midpoint_is_average():
    g = OccupancyGrid.create((4, 4, 4), PARAMS)
    g.opacity_raw[1, 2, 2] = 2.0
    g.opacity_raw[2, 2, 2] = 4.0
    c = g.index_to_contracted(np.array([1.5, 2.0, 2.0]))
    assert g.sample_trilinear(c[None])[0][0] == pytest.approx(3.0)


def test_matches_literal_trilinear():
    g = make(C=3)
    rng = np.random.default_rng(1)
    c = rng.uniform(-0.999, 0.999, (200, 3))
    op, sem = g.sample_trilinear(c)
    idx = g.contracted_to_index(c)
    ref = [trilinear_literal(g.opacity_raw, i) for i in idx]
    np.testing.assert_allclose(op, ref, atol=1e-12)
    ref1 = [trilinear_literal(g.semantic_raw[..., 1], i) for i in idx]
    np.testing.assert_allclose(sem[:, 1], ref1, atol=1e-12)


def test_weights_partition_of_unity():
    g = make()
    c = np.random.default_rng(2).uniform(-1, 1, (500, 3))
    flat, w = g.trilinear_corners(c)
    np.testing.assert_allclose(w.sum(-1), 1.0)
    assert (w >= 0).all()
    assert flat.min() >= 0 and flat.max() < np.prod(g.dims)


def test_scatter_center_and_sum():
    g = make(C=2)
    c = g.index_to_contracted(np.array([[4, 4, 2]]))
    g.scatter_gradient(g.trilinear_corners(c), np.array([1.0]), np.array([[1.0, -2.0]]))
    assert g.grad_opacity[4, 4, 2] == 1.0
    assert np.count_nonzero(g.grad_opacity) == 1
    np.testing.assert_allclose(g.grad_semantic[4, 4, 2], [1.0, -2.0])
    g.zero_grad()
    c = np.random.default_rng(3).uniform(-1, 1, (50, 3))
    up = np.random.default_rng(4).normal(size=50)
    g.scatter_gradient(g.trilinear_corners(c), up)
    assert g.grad_opacity.sum() == pytest.approx(up.sum())


def test_scatter_is_adjoint_of_sampling():
    g = make()
    c = np.random.default_rng(5).uniform(-1, 1, (100, 3))
    corners = g.trilinear_corners(c)
    up = np.random.default_rng(6).normal(size=100)
    g.scatter_gradient(corners, up)
    h = 1e-6
    for flat in (int(corners[0][0, 0]), int(corners[0][7, 3])):
        i = np.unravel_index(flat, g.dims)
        base = (g.sample_trilinear(c, corners)[0] * up).sum()
        g.opacity_raw[i] += h
        bumped = (g.sample_trilinear(c, corners)[0] * up).sum()
        g.opacity_raw[i] -= h
        assert (bumped - base) / h == pytest.approx(g.grad_opacity[i], rel=1e-6, abs=1e-9)


def test_scatter_independent_of_batching():
    g = make()
    c = np.random.default_rng(7).uniform(-1, 1, (300, 3))
    up = np.random.default_rng(8).normal(size=300)
    g.scatter_gradient(g.trilinear_corners(c), up)
    whole = g.grad_opacity.copy()
    g.zero_grad()
    for s in (slice(0, 100), slice(100, 300)):
        g.scatter_gradient(g.trilinear_corners(c[s]), up[s])
    np.testing.assert_allclose(g.grad_opacity, whole, atol=1e-13)


def test_mapping_chain_lands_near_start():
    g = make()
    rng = np.random.default_rng(9)
    p = rng.uniform([-4, -4, -1], [4, 4, 3], (200, 3))
    idx = np.round(g.ego_to_index(p))
    back = invert_point(g.index_to_contracted(idx), PARAMS)
    assert (np.abs(back - p) <= g.voxel_size / 2 + 1e-9).all()


def test_inside_voxel_centers():
    g = make()
    cen = g.inside_voxel_centers()
    assert cen.shape == (8, 8, 4, 3)
    np.testing.assert_allclose(cen[0, 0, 0], [-3.5, -3.5, -0.5], atol=1e-12)
    np.testing.assert_allclose(contract_point(cen[-1, -1, -1], PARAMS),
                               g.index_to_contracted(np.array([9, 9, 4])), atol=1e-12)


def test_validation():
    with pytest.raises(InvalidParameterError):
        OccupancyGrid.create((1, 4, 4), PARAMS)
    with pytest.raises(InvalidParameterError):
        OccupancyGrid.create((4, 4, 4), PARAMS, mode="foo")
    with pytest.raises(InvalidParameterError):
        OccupancyGrid.create((6, 6, 6), PARAMS, inside_dims=(3, 4, 4))
