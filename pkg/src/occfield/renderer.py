"""Alpha compositing of per-sample opacity into depth, semantics and coverage.

Two parameterizations of per-sample opacity are supported:

* ``density``: sigma >= 0 with alpha_k = 1 - exp(-sigma_k delta_k);
* ``weight``: alpha_k in [0, 1] is given directly.

Weights are ``w_k = T_k alpha_k`` with ``T_k`` the transmittance before
sample ``k``.  Depth is ``sum_k w_k t_k`` (not normalized by coverage).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NumericalError
from .grid import DENSITY_MODE, MODES, WEIGHT_MODE


@dataclass
class RenderedRays:
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    alpha: np.ndarray
    semantics: np.ndarray | None = None

    @property
    def final_transmittance(self) -> np.ndarray:
        """Transmittance past the last sample (padding has alpha 0)."""
        return self.transmittance[..., -1] * (1.0 - self.alpha[..., -1])

    def normalized_depth(self, eps: float = 1e-10) -> np.ndarray:
        return self.depth / np.maximum(self.opacity, eps)


def _check(values, mode):
    if mode not in MODES:
        raise InvalidParameterError(f"unknown render mode {mode!r}")
    if np.any(np.isnan(values)):
        raise NumericalError("NaN in per-sample opacity")


def composite(values, delta, mode: str, mask=None):
    """Per-sample compositing alpha, transmittance and weights, all ``(R, L)``."""
    values = np.asarray(values, dtype=np.float64)
    _check(values, mode)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    if mode == DENSITY_MODE:
        tau = np.where(mask, values * np.asarray(delta, dtype=np.float64), 0.0)
        excl = np.cumsum(tau, axis=-1) - tau
        trans = np.exp(-excl)
        alpha = -np.expm1(-tau)
    else:
        alpha = np.where(mask, values, 0.0)
        keep = 1.0 - alpha
        trans = np.ones_like(alpha)
        if alpha.shape[-1] > 1:
            trans[..., 1:] = np.cumprod(keep[..., :-1], axis=-1)
    return alpha, trans, trans * alpha


def render(t, delta, values, mode: str = WEIGHT_MODE, mask=None, logits=None) -> RenderedRays:
    """Composite samples of a ray batch.

    ``values`` holds alpha (weight mode) or sigma (density mode); ``logits``
    optionally ``(R, L, C)`` per-sample semantic logits.
    """
    t = np.asarray(t, dtype=np.float64)
    alpha, trans, w = composite(values, delta, mode, mask)
    sem = None
    if logits is not None:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape[:-1] != w.shape:
            raise InvalidParameterError(
                f"logits shape {logits.shape} does not match samples {w.shape}")
        sem = np.einsum("...k,...kc->...c", w, logits)
    return RenderedRays(depth=(w * t).sum(-1), opacity=w.sum(-1), weights=w,
                        transmittance=trans, alpha=alpha, semantics=sem)


def render_depth(samples, values, mode: str = WEIGHT_MODE) -> RenderedRays:
    return render(samples.t, samples.delta, values, mode, samples.mask)


def render_semantics(samples, values, logits, mode: str = WEIGHT_MODE):
    return render(samples.t, samples.delta, values, mode, samples.mask, logits).semantics


def _remaining(alpha, v):
    """``rem_k = sum_{j>k} prod_{k<i<j}(1 - alpha_i) alpha_j v_j`` by backward recursion.

    Written without dividing by transmittance so fully opaque samples are fine.
    """
    rem = np.zeros_like(v)
    L = v.shape[-1]
    for k in range(L - 2, -1, -1):
        rem[..., k] = alpha[..., k + 1] * v[..., k + 1] + (1.0 - alpha[..., k + 1]) * rem[..., k + 1]
    return rem


def render_backward(rendered: RenderedRays, t, delta, values, mode: str = WEIGHT_MODE,
                    grad_depth=None, grad_opacity=None, grad_semantics=None, logits=None,
                    mask=None):
    """Reverse pass of :func:`render`.

    Returns ``(grad_values, grad_logits, grad_t)``; ``grad_logits`` is None
    unless ``grad_semantics`` is given.
    """
    w = rendered.weights
    alpha = rendered.alpha
    trans = rendered.transmittance
    t = np.asarray(t, dtype=np.float64)
    # per-sample contribution v_k whose weighted sum is the (scalarized) output
    v = np.zeros_like(w)
    grad_t = np.zeros_like(w)
    if grad_depth is not None:
        gd = np.asarray(grad_depth, dtype=np.float64)[..., None]
        v = v + gd * t
        grad_t = gd * w
    if grad_opacity is not None:
        v = v + np.asarray(grad_opacity, dtype=np.float64)[..., None]
    grad_logits = None
    if grad_semantics is not None:
        gs = np.asarray(grad_semantics, dtype=np.float64)
        v = v + np.einsum("...kc,...c->...k", logits, gs)
        grad_logits = w[..., None] * gs[..., None, :]
    d_alpha = trans * (v - _remaining(alpha, v))
    if mode == DENSITY_MODE:
        delta = np.asarray(delta, dtype=np.float64)
        grad_values = d_alpha * delta * (1.0 - alpha)
    else:
        grad_values = d_alpha
    if mask is not None:
        grad_values = np.where(mask, grad_values, 0.0)
    return grad_values, grad_logits, grad_t
