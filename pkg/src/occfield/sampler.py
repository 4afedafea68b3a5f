"""Ray sampling uniform in contracted distance.

Each ray gets its own inside bound ``r_b`` (the half-length of the inside box
seen along its direction) and a sample count ``L = 2 r_b / (alpha d_v)``.
Fractions ``u`` in (0, 1) are drawn per ray and pushed through the scalar
inverse contraction to metric distances from the ray origin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contraction import ContractionParams, contract_point, invert_normalized
from .errors import InvalidParameterError

U_EPS = 1e-4
SAMPLING_MODES = ("stratified", "uniform", "midpoint")


@dataclass
class RaySamples:
    """Padded batch of per-ray samples.

    Arrays are ``(R, Lmax)``; entries past ``count[r]`` are padding with
    ``mask == False``, ``t == delta == 0``.  ``t`` is metric distance along the
    unit direction; ``points`` are ego-frame, ``contracted`` in (-1, 1)^3.
    """

    t: np.ndarray
    delta: np.ndarray
    mask: np.ndarray
    count: np.ndarray
    r_b: np.ndarray
    u: np.ndarray
    points: np.ndarray
    contracted: np.ndarray

    @property
    def num_rays(self) -> int:
        return self.t.shape[0]

    def strided(self, stride: int) -> "RaySamples":
        """Every ``stride``-th sample of each ray, starting from the first.

        Intervals are recomputed over the kept samples so the density mode
        still integrates over the full ray.
        """
        if stride <= 1:
            return self
        t = self.t[:, ::stride]
        mask = self.mask[:, ::stride]
        count = mask.sum(1)
        delta = _intervals(t, count)
        return RaySamples(t, delta, mask, count, self.r_b, self.u[:, ::stride],
                          self.points[:, ::stride], self.contracted[:, ::stride])


def ray_bound(directions, params: ContractionParams):
    """Per-ray inside bound: ``|d ⊙ l| / (2 |d|)`` with ``l`` the inside edge lengths."""
    d = np.asarray(directions, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(~(norm > 0)):
        raise InvalidParameterError("ray directions must be non-zero")
    return np.linalg.norm(d * params.lengths, axis=-1) / (2.0 * norm)


def sample_count(r_b, alpha: float, d_v: float):
    if not d_v > 0:
        raise InvalidParameterError("voxel size must be positive")
    n = 2.0 * np.asarray(r_b, dtype=np.float64) / (alpha * d_v)
    # absorb roundoff so 300.00000000000006 counts as 300
    return np.maximum(np.ceil(n - 1e-9 * np.maximum(n, 1.0)).astype(np.int64), 2)


def fractions_for(counts, rng: np.random.Generator | None, mode: str = "stratified"):
    """Per-ray ascending fractions in (0, 1), padded to ``(R, max(counts))``."""
    if mode not in SAMPLING_MODES:
        raise InvalidParameterError(f"unknown sampling mode {mode!r}")
    counts = np.asarray(counts, dtype=np.int64)
    R = counts.shape[0]
    Lmax = int(counts.max()) if R else 0
    k = np.arange(Lmax, dtype=np.float64)[None, :]
    n = counts[:, None].astype(np.float64)
    mask = k < n
    if mode == "midpoint":
        u = (k + 0.5) / n
    elif mode == "stratified":
        u = (k + rng.random((R, Lmax))) / n
    else:
        u = np.sort(np.where(mask, rng.random((R, Lmax)), np.inf), axis=1)
    u = np.where(mask, np.clip(u, U_EPS, 1.0 - U_EPS), 0.0)
    return u, mask


def _intervals(t, count):
    delta = np.zeros_like(t)
    if t.shape[1] > 1:
        delta[:, :-1] = t[:, 1:] - t[:, :-1]
    # last real interval repeats the previous spacing
    rows = np.arange(t.shape[0])
    last = np.maximum(count - 1, 0)
    prev = np.maximum(count - 2, 0)
    delta[rows, last] = np.where(count >= 2, delta[rows, prev], 0.0)
    k = np.arange(t.shape[1])[None, :]
    return np.where(k < count[:, None], delta, 0.0)


def distances_from_fractions(u, r_b, alpha: float):
    """Inverse scalar contraction: fraction ``u`` -> metric distance."""
    return np.asarray(r_b)[..., None] * invert_normalized(u, alpha)


def sample_rays(origins, directions, params: ContractionParams, d_v: float,
                rng: np.random.Generator | int | None = None, mode: str = "stratified",
                max_samples: int | None = None) -> RaySamples:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    r_b = ray_bound(directions, params)
    count = sample_count(r_b, params.alpha, d_v)
    if max_samples is not None:
        count = np.minimum(count, max_samples)
    u, mask = fractions_for(count, rng, mode)
    t = np.where(mask, distances_from_fractions(np.where(mask, u, 0.0), r_b, params.alpha), 0.0)
    delta = _intervals(t, count)
    unit = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    pts = origins[:, None, :] + t[..., None] * unit[:, None, :]
    contracted = contract_point(pts, params)
    return RaySamples(t, delta, mask, count, r_b, u, pts, contracted)


def sample_ray(ray, params: ContractionParams, d_v: float, seed=None,
               mode: str = "stratified") -> RaySamples:
    """Single-ray convenience wrapper around :func:`sample_rays`."""
    return sample_rays(ray.origin[None], ray.direction[None], params, d_v,
                       np.random.default_rng(seed), mode)
