"""Dense voxel grid over the contracted cube.

Grid axes are the contracted axes: voxel ``i`` along an axis of size ``N`` has
its center at ``c = -1 + (i + 0.5) * 2 / N``.  The central ``inside_dims``
block covers the linear part of the contraction (``|c| <= alpha``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contraction import ContractionParams, contract_point, invert_point
from .errors import InvalidParameterError

WEIGHT_MODE = "weight"
DENSITY_MODE = "density"
MODES = (WEIGHT_MODE, DENSITY_MODE)

# 8 corner offsets in (x, y, z), x slowest
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def activate(raw, mode: str):
    """Raw opacity parameter -> per-sample alpha (weight mode) or density."""
    return sigmoid(raw) if mode == WEIGHT_MODE else softplus(raw)


def activation_grad(raw, mode: str):
    # softplus' == sigmoid, sigmoid' == s (1 - s)
    s = sigmoid(raw)
    return s * (1.0 - s) if mode == WEIGHT_MODE else s


def inverse_activation(value: float, mode: str) -> float:
    if mode == WEIGHT_MODE:
        return float(np.log(value / (1.0 - value)))
    return float(np.log(np.expm1(value)))


def inside_dims_for(dims, alpha: float) -> tuple[int, int, int]:
    out = []
    for n in dims:
        m = int(round(alpha * n))
        if (n - m) % 2:
            m -= 1
        out.append(m)
    return tuple(out)


@dataclass
class OccupancyGrid:
    dims: tuple[int, int, int]
    contraction: ContractionParams
    opacity_raw: np.ndarray
    semantic_raw: np.ndarray | None = None
    mode: str = WEIGHT_MODE
    inside_dims: tuple[int, int, int] | None = None
    grad_opacity: np.ndarray = field(init=False, repr=False)
    grad_semantic: np.ndarray | None = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise InvalidParameterError("grid needs at least 2 voxels per axis")
        if self.mode not in MODES:
            raise InvalidParameterError(f"unknown opacity mode {self.mode!r}")
        if self.inside_dims is None:
            self.inside_dims = inside_dims_for(self.dims, self.contraction.alpha)
        self.inside_dims = tuple(int(n) for n in self.inside_dims)
        for n, m in zip(self.dims, self.inside_dims):
            if not 0 < m <= n or (n - m) % 2:
                raise InvalidParameterError(
                    f"inside dims {self.inside_dims} must be centered inside {self.dims}")
        self.opacity_raw = np.ascontiguousarray(self.opacity_raw, dtype=np.float64)
        if self.opacity_raw.shape != self.dims:
            raise InvalidParameterError("opacity_raw shape does not match dims")
        if self.semantic_raw is not None:
            self.semantic_raw = np.ascontiguousarray(self.semantic_raw, dtype=np.float64)
            if self.semantic_raw.shape[:3] != self.dims or self.semantic_raw.ndim != 4:
                raise InvalidParameterError("semantic_raw must have shape dims + (C,)")
        self.zero_grad()

    @classmethod
    def create(cls, dims, contraction: ContractionParams, num_classes: int = 0,
               mode: str = WEIGHT_MODE, init_opacity: float = 0.01,
               inside_dims=None) -> "OccupancyGrid":
        dims = tuple(int(n) for n in dims)
        raw = np.full(dims, inverse_activation(init_opacity, mode))
        sem = np.zeros(dims + (num_classes,)) if num_classes else None
        return cls(dims, contraction, raw, sem, mode, inside_dims)

    @property
    def num_classes(self) -> int:
        return 0 if self.semantic_raw is None else self.semantic_raw.shape[3]

    @property
    def voxel_size(self) -> np.ndarray:
        """Metric edge of an inside-region voxel, per axis."""
        return self.contraction.lengths / np.asarray(self.inside_dims)

    @property
    def d_v(self) -> float:
        return float(self.voxel_size.min())

    def zero_grad(self):
        self.grad_opacity = np.zeros(self.dims)
        self.grad_semantic = None if self.semantic_raw is None else np.zeros_like(self.semantic_raw)

    def copy(self) -> "OccupancyGrid":
        sem = None if self.semantic_raw is None else self.semantic_raw.copy()
        return OccupancyGrid(self.dims, self.contraction, self.opacity_raw.copy(), sem,
                             self.mode, self.inside_dims)

    # -- coordinates -------------------------------------------------------

    def contracted_to_index(self, c):
        """Continuous voxel index (voxel centers at integers), clamped to the grid."""
        n = np.asarray(self.dims, dtype=np.float64)
        idx = (np.asarray(c, dtype=np.float64) + 1.0) * 0.5 * n - 0.5
        return np.clip(idx, 0.0, n - 1.0)

    def index_to_contracted(self, idx):
        n = np.asarray(self.dims, dtype=np.float64)
        return (np.asarray(idx, dtype=np.float64) + 0.5) * 2.0 / n - 1.0

    def inside_offset(self) -> np.ndarray:
        return (np.asarray(self.dims) - np.asarray(self.inside_dims)) // 2

    def inside_slices(self):
        o = self.inside_offset()
        return tuple(slice(int(o[i]), int(o[i] + self.inside_dims[i])) for i in range(3))

    def inside_voxel_centers(self) -> np.ndarray:
        """Ego-frame centers of the inside block, shape ``inside_dims + (3,)``."""
        o = self.inside_offset()
        ii = np.stack(np.meshgrid(*[np.arange(m) for m in self.inside_dims], indexing="ij"), -1)
        return invert_point(self.index_to_contracted(ii + o), self.contraction)

    def ego_to_index(self, p):
        return self.contracted_to_index(contract_point(p, self.contraction))

    # -- sampling ----------------------------------------------------------

    def trilinear_corners(self, c):
        """Flat corner indices and weights, each of shape ``c.shape[:-1] + (8,)``.

        Corner ``k`` has offset ``((k >> 2) & 1, (k >> 1) & 1, k & 1)``.
        """
        idx = self.contracted_to_index(c)
        n = np.asarray(self.dims)
        base = np.minimum(np.floor(idx).astype(np.int64), n - 2)
        frac = idx - base
        lead = idx.shape[:-1]
        fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
        wx = np.stack((1.0 - fx, fx), -1)
        wy = np.stack((1.0 - fy, fy), -1)
        wz = np.stack((1.0 - fz, fz), -1)
        wxy = wx[..., :, None] * wy[..., None, :]
        w = (wxy[..., :, :, None] * wz[..., None, None, :]).reshape(lead + (8,))
        origin = (base[..., 0] * n[1] + base[..., 1]) * n[2] + base[..., 2]
        offsets = (_CORNERS[:, 0] * n[1] + _CORNERS[:, 1]) * n[2] + _CORNERS[:, 2]
        return origin[..., None] + offsets, w

    def sample_trilinear(self, c, corners=None):
        """Interpolated raw opacity and (if present) raw semantic logits at ``c``."""
        flat, w = self.trilinear_corners(c) if corners is None else corners
        op = (self.opacity_raw.reshape(-1)[flat] * w).sum(-1)
        if self.semantic_raw is None:
            return op, None
        sem = np.einsum("...k,...kc->...c", w,
                        self.semantic_raw.reshape(-1, self.num_classes)[flat])
        return op, sem

    def scatter_gradient(self, corners, upstream_opacity=None, upstream_semantic=None):
        """Accumulate ``upstream * weight`` into the 8 corner slots of each query.

        ``np.bincount`` sums in index order, so the result does not depend on
        how queries are batched.
        """
        flat, w = corners
        size = int(np.prod(self.dims))
        if upstream_opacity is not None:
            contrib = (np.asarray(upstream_opacity)[..., None] * w).reshape(-1)
            self.grad_opacity += np.bincount(flat.reshape(-1), contrib, minlength=size).reshape(self.dims)
        if upstream_semantic is not None and self.semantic_raw is not None:
            C = self.num_classes
            up = np.asarray(upstream_semantic).reshape(-1, C)
            f = flat.reshape(-1, 8)
            ww = w.reshape(-1, 8)
            contrib = (ww[:, :, None] * up[:, None, :]).reshape(-1)
            slots = (f[:, :, None] * C + np.arange(C)).reshape(-1)
            g = np.bincount(slots, contrib, minlength=size * C)
            self.grad_semantic += g.reshape(self.semantic_raw.shape)
