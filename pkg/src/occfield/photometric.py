"""Photometric self-supervision: inverse warping, SSIM + L1 error,
per-pixel minimum reprojection with auto-masking, and the combined loss.

Images are float arrays ``(..., H, W, C)`` in [0, 1].  Every differentiable
step has a matching ``*_backward`` returning the gradient with respect to the
warped image or the target-view depth.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidParameterError, NumericalError
from .geometry import CameraModel, Pose, bilinear_sample

log = logging.getLogger(__name__)

UNCERTAIN = 255


@dataclass
class LossConfig:
    beta: float = 0.85
    lam: float = 0.05
    ssim_window: int = 3
    c1: float = 0.01**2
    c2: float = 0.03**2
    automask: bool = True
    # "camera": average each view's valid pixels, then sum views
    reduction: str = "camera"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidParameterError("beta must lie in [0, 1]")
        if self.lam < 0:
            raise InvalidParameterError("lambda must be non-negative")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise InvalidParameterError("SSIM window must be odd and >= 3")
        if self.reduction not in ("camera", "pixel"):
            raise InvalidParameterError("reduction must be 'camera' or 'pixel'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


# -- SSIM ----------------------------------------------------------------------

def _reflect_pad(x, p):
    pad = [(0, 0)] * x.ndim
    pad[-3] = (p, p)
    pad[-2] = (p, p)
    return np.pad(x, pad, mode="reflect")


def _fold_reflect(g, p):
    """Adjoint of :func:`_reflect_pad` over the two spatial axes."""
    g = g.copy()
    for axis in (-3, -2):
        n = g.shape[axis] - 2 * p
        g = np.moveaxis(g, axis, 0)
        for i in range(p):
            g[2 * p - i] += g[i]
            g[n - 2 + p - i] += g[n + p + i]
        g = np.moveaxis(g[p:p + n], 0, axis)
    return g


def _box(x, k):
    """Mean over ``k×k`` windows, valid mode."""
    H = x.shape[-3] - k + 1
    W = x.shape[-2] - k + 1
    acc = np.zeros(x.shape[:-3] + (H, W) + x.shape[-1:])
    for di in range(k):
        for dj in range(k):
            acc += x[..., di:di + H, dj:dj + W, :]
    return acc / (k * k)


def _box_adjoint(g, k):
    H = g.shape[-3] + k - 1
    W = g.shape[-2] + k - 1
    out = np.zeros(g.shape[:-3] + (H, W) + g.shape[-1:])
    h, w = g.shape[-3], g.shape[-2]
    for di in range(k):
        for dj in range(k):
            out[..., di:di + h, dj:dj + w, :] += g
    return out / (k * k)


@dataclass
class _SSIMCache:
    xp: np.ndarray
    yp: np.ndarray
    S: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    k: int


def ssim_per_channel(x, y, window=3, c1=0.01**2, c2=0.03**2, return_cache=False):
    """Unclamped per-channel SSIM map with box pooling and reflection padding."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidParameterError(f"shape mismatch {x.shape} vs {y.shape}")
    p = window // 2
    xp, yp = _reflect_pad(x, p), _reflect_pad(y, p)
    mu_x, mu_y = _box(xp, window), _box(yp, window)
    sxx = _box(xp * xp, window) - mu_x**2
    syy = _box(yp * yp, window) - mu_y**2
    sxy = _box(xp * yp, window) - mu_x * mu_y
    A1 = 2 * mu_x * mu_y + c1
    A2 = 2 * sxy + c2
    B1 = mu_x**2 + mu_y**2 + c1
    B2 = sxx + syy + c2
    S = A1 * A2 / (B1 * B2)
    if return_cache:
        return S, _SSIMCache(xp, yp, S, mu_x, mu_y, A1, A2, B1, B2, window)
    return S


def ssim_backward(cache: _SSIMCache, grad_S):
    """Gradient of ``sum(grad_S * S)`` with respect to ``y``."""
    c = cache
    gS = grad_S * c.S
    g_ey = gS * (2 * c.mu_x / c.A1 - 2 * c.mu_y / c.B1 - 2 * c.mu_x / c.A2 + 2 * c.mu_y / c.B2)
    g_exy = gS * 2 / c.A2
    g_eyy = -gS / c.B2
    gp = _box_adjoint(g_ey, c.k) + c.xp * _box_adjoint(g_exy, c.k) + 2 * c.yp * _box_adjoint(g_eyy, c.k)
    return _fold_reflect(gp, c.k // 2)


def ssim(x, y, config: LossConfig | None = None):
    """Per-pixel SSIM clamped to [0, 1], averaged over channels."""
    cfg = config or LossConfig()
    S = ssim_per_channel(x, y, cfg.ssim_window, cfg.c1, cfg.c2)
    return np.clip(S, 0.0, 1.0).mean(-1)


# -- photometric error -----------------------------------------------------------

@dataclass
class _PECache:
    ssim: _SSIMCache
    resid: np.ndarray
    beta: float


def photometric_error(target, warped, config: LossConfig | None = None, return_cache=False):
    """Per-pixel ``beta/2 (1 - SSIM) + (1 - beta) |I - I_hat|_1`` (L1 averaged over channels)."""
    cfg = config or LossConfig()
    target = np.asarray(target, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    if target.shape != warped.shape:
        raise InvalidParameterError(f"shape mismatch {target.shape} vs {warped.shape}")
    S, cache = ssim_per_channel(target, warped, cfg.ssim_window, cfg.c1, cfg.c2, True)
    resid = warped - target
    s = np.clip(S, 0.0, 1.0).mean(-1)
    pe = 0.5 * cfg.beta * (1.0 - s) + (1.0 - cfg.beta) * np.abs(resid).mean(-1)
    if return_cache:
        return pe, _PECache(cache, resid, cfg.beta)
    return pe


def photometric_error_backward(cache: _PECache, grad_pe):
    """Gradient with respect to the warped image, shape ``(..., H, W, C)``."""
    C = cache.resid.shape[-1]
    g = np.asarray(grad_pe, dtype=np.float64)[..., None]
    S = cache.ssim.S
    inside = (S > 0.0) & (S < 1.0)
    g_S = np.where(inside, -0.5 * cache.beta * g / C, 0.0)
    return ssim_backward(cache.ssim, g_S) + (1.0 - cache.beta) * g / C * np.sign(cache.resid)


# -- warping -------------------------------------------------------------------

@dataclass
class WarpResult:
    image: np.ndarray
    valid: np.ndarray
    # cached for the reverse pass
    du_dz: np.ndarray | None = field(default=None, repr=False)
    dv_dz: np.ndarray | None = field(default=None, repr=False)
    dI_du: np.ndarray | None = field(default=None, repr=False)
    dI_dv: np.ndarray | None = field(default=None, repr=False)
    u: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def relative_pose(world_from_target: Pose, world_from_source: Pose) -> Pose:
    """Pose mapping target-ego coordinates into source-ego coordinates."""
    return world_from_source.inverse() @ world_from_target


def warp_pixels(u, v, depth, target_cam: CameraModel, source_cam: CameraModel,
                rel: Pose, source_image) -> WarpResult:
    """Inverse-warp: sample ``source_image`` where target pixels ``(u, v)`` at
    camera z-depth ``depth`` land in the source view.

    ``rel`` maps target-ego to source-ego coordinates.
    """
    depth = np.asarray(depth, dtype=np.float64)
    src_from_tgt = source_cam.ego_from_camera.inverse() @ rel @ target_cam.ego_from_camera
    q = target_cam.camera_directions(u, v)
    m = q @ src_from_tgt.rotation.T
    X = depth[..., None] * m + src_from_tgt.translation
    Z = X[..., 2]
    front = Z > 1e-6
    Zs = np.where(front, Z, 1.0)
    us = source_cam.fx * X[..., 0] / Zs + source_cam.cx
    vs = source_cam.fy * X[..., 1] / Zs + source_cam.cy
    val, inb, dIu, dIv = bilinear_sample(source_image, us, vs, with_grad=True)
    valid = inb & front & (depth > 0) & np.isfinite(depth)
    du_dz = source_cam.fx * (m[..., 0] * Z - X[..., 0] * m[..., 2]) / Zs**2
    dv_dz = source_cam.fy * (m[..., 1] * Z - X[..., 1] * m[..., 2]) / Zs**2
    return WarpResult(val, valid, du_dz, dv_dz, dIu, dIv, us, vs)


def warp_adjacent(depth, target_cam: CameraModel, source_cam: CameraModel, rel: Pose,
                  source_image) -> WarpResult:
    """Full-image inverse warp of ``source_image`` into the target view."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return warp_pixels(u, v, depth, target_cam, source_cam, rel, source_image)


def warp_backward(result: WarpResult, grad_image):
    """Gradient of ``sum(grad_image * warped)`` with respect to target depth."""
    g = np.asarray(grad_image, dtype=np.float64)
    gu = g * result.dI_du
    gv = g * result.dI_dv
    if gu.ndim > result.valid.ndim:
        gu, gv = gu.sum(-1), gv.sum(-1)
    return np.where(result.valid, gu * result.du_dz + gv * result.dv_dz, 0.0)


# -- reductions ----------------------------------------------------------------

def min_reprojection(losses, identity_losses=None, automask: bool = True):
    """Per-pixel minimum over source frames, with optional auto-masking.

    Invalid warps should be passed as ``inf``.  Returns ``(loss, mask, argmin)``;
    ``mask`` is False where no source was valid or where the unwarped source
    already matches better than any warp.
    """
    if len(losses) < 1:
        raise InvalidParameterError("need at least one source frame")
    stack = np.stack([np.asarray(l, dtype=np.float64) for l in losses])
    arg = np.argmin(stack, axis=0)
    best = np.take_along_axis(stack, arg[None], 0)[0]
    mask = np.isfinite(best)
    if automask and identity_losses is not None and len(identity_losses):
        ident = np.min(np.stack([np.asarray(l, dtype=np.float64) for l in identity_losses]), axis=0)
        mask &= best < ident
    return best, mask, arg


def cross_entropy(logits, labels, ignore_index: int = UNCERTAIN):
    """Mean softmax cross-entropy over non-ignored rows; returns ``(loss, grad, count)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    keep = labels != ignore_index
    n = int(keep.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad, 0
    z = logits[keep]
    z = z - z.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    lab = labels[keep].astype(np.int64)
    if np.any(lab >= logits.shape[-1]):
        raise InvalidParameterError("label id exceeds number of classes")
    loss = float((lse - z[np.arange(n), lab]).mean())
    p = np.exp(z - lse[:, None])
    p[np.arange(n), lab] -= 1.0
    grad[keep] = p / n
    return loss, grad, n


@dataclass
class LossTerms:
    total: float
    photometric: float
    semantic: float
    # per-view gradient maps of total with respect to the per-pixel losses
    pe_grads: list = field(repr=False)
    valid_pixels: int = 0


def total_loss(pe_maps, pe_masks, semantic_ce=None, config: LossConfig | None = None) -> LossTerms:
    """``sum_i pe_i + lambda * sem`` with ``pe_i`` the mean over view ``i``'s valid pixels.

    ``semantic_ce`` is the already-averaged cross-entropy (or None).  With
    ``reduction == "pixel"`` all views' valid pixels are pooled into one mean.
    If no pixel is valid the photometric part is zero and a warning is issued.
    """
    cfg = config or LossConfig()
    grads = []
    pe_total = 0.0
    nvalid = sum(int(np.count_nonzero(m)) for m in pe_masks)
    if nvalid == 0:
        warnings.warn("no valid pixels for the photometric loss; contributing 0", RuntimeWarning)
    for pe, m in zip(pe_maps, pe_masks):
        pe = np.asarray(pe, dtype=np.float64)
        n = int(np.count_nonzero(m))
        denom = n if cfg.reduction == "camera" else nvalid
        if n == 0:
            grads.append(np.zeros_like(pe))
            continue
        vals = pe[m]
        if not np.all(np.isfinite(vals)):
            raise NumericalError("non-finite photometric loss")
        pe_total += float(vals.sum()) / denom
        grads.append(np.where(m, 1.0 / denom, 0.0))
    sem = 0.0 if semantic_ce is None else float(semantic_ce)
    if not np.isfinite(sem):
        raise NumericalError("non-finite semantic loss")
    return LossTerms(pe_total + cfg.lam * sem, pe_total, sem, grads, nvalid)
