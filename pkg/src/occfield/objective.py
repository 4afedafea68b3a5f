"""Forward and reverse pass of the training objective for one batch of views.

A *view* is a set of pixel patches of one camera at one frame.  Depth is
rendered for every view pixel, each view's adjacent frames are warped into
it, and the per-pixel minimum reprojection error is averaged per view.  Key
frame views may additionally carry semantic cross-entropy on a strided subset
of the same ray samples.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import generate_rays
from .grid import OccupancyGrid, activate, activation_grad
from .photometric import (UNCERTAIN, LossConfig, LossTerms, cross_entropy, min_reprojection,
                          photometric_error, photometric_error_backward, total_loss,
                          warp_backward, warp_pixels)
from .renderer import render, render_backward
from .sampler import sample_rays


@dataclass
class View:
    frame: int
    camera: int
    u: np.ndarray  # (B, ph, pw) integer pixel columns
    v: np.ndarray

    @property
    def size(self) -> int:
        return self.u.size


def full_image_views(fs, frames, cameras=None) -> list[View]:
    H, W = fs.image_shape
    v, u = np.mgrid[0:H, 0:W]
    cams = range(fs.num_cameras) if cameras is None else cameras
    return [View(f, c, u[None].astype(np.int64), v[None].astype(np.int64)) for f in frames for c in cams]


def random_patch_views(fs, frames, rng, patches: int, patch: int) -> list[View]:
    H, W = fs.image_shape
    ph, pw = min(patch, H), min(patch, W)
    dv, du = np.mgrid[0:ph, 0:pw]
    views = []
    for f in frames:
        for c in range(fs.num_cameras):
            top = rng.integers(0, H - ph + 1, patches)
            left = rng.integers(0, W - pw + 1, patches)
            views.append(View(f, c, left[:, None, None] + du[None], top[:, None, None] + dv[None]))
    return views


@dataclass
class RayPass:
    """Forward state of one rendered ray batch, kept for the reverse pass."""

    samples: object
    corners: tuple
    raw: np.ndarray
    values: np.ndarray
    rendered: object
    logits: np.ndarray | None = None


def forward_rays(grid: OccupancyGrid, samples, with_semantics=False) -> RayPass:
    corners = grid.trilinear_corners(samples.contracted)
    flat, w = corners
    raw = (grid.opacity_raw.reshape(-1)[flat] * w).sum(-1)
    values = np.where(samples.mask, activate(raw, grid.mode), 0.0)
    logits = None
    if with_semantics:
        logits = np.einsum("...k,...kc->...c", w,
                           grid.semantic_raw.reshape(-1, grid.num_classes)[flat])
    rendered = render(samples.t, samples.delta, values, grid.mode, samples.mask, logits)
    return RayPass(samples, corners, raw, values, rendered, logits)


def backward_rays(grid: OccupancyGrid, rp: RayPass, grad_depth=None, grad_opacity=None,
                  grad_semantics=None):
    s = rp.samples
    gv, gl, _ = render_backward(rp.rendered, s.t, s.delta, rp.values, grid.mode,
                                grad_depth, grad_opacity, grad_semantics, rp.logits, s.mask)
    graw = gv * activation_grad(rp.raw, grid.mode)
    if gl is not None:
        gl = np.where(s.mask[..., None], gl, 0.0)
    grid.scatter_gradient(rp.corners, graw, gl)


def render_depth_image(grid: OccupancyGrid, camera, rng=None, mode="midpoint", chunk=8192,
                       semantics=False):
    """Render z-depth, coverage and (optionally) semantic argmax for a whole image."""
    u, v = camera.pixel_grid()
    o, d = generate_rays(camera, u, v)
    dn = np.linalg.norm(d, axis=-1)
    depth = np.empty(u.size)
    opac = np.empty(u.size)
    sem = np.empty((u.size, grid.num_classes)) if semantics and grid.num_classes else None
    rng = np.random.default_rng(rng)
    for i in range(0, u.size, chunk):
        sl = slice(i, i + chunk)
        s = sample_rays(o[sl], d[sl], grid.contraction, grid.d_v, rng, mode)
        rp = forward_rays(grid, s, with_semantics=sem is not None)
        depth[sl] = rp.rendered.depth / dn[sl]
        opac[sl] = rp.rendered.opacity
        if sem is not None:
            sem[sl] = rp.rendered.semantics
    shape = (camera.height, camera.width)
    out = {"depth": depth.reshape(shape), "opacity": opac.reshape(shape)}
    if sem is not None:
        out["semantics"] = sem.reshape(shape + (grid.num_classes,))
    return out


@dataclass
class ObjectiveResult:
    terms: LossTerms
    signature: str | None = None
    view_losses: list = field(default_factory=list)
    view_masks: list = field(default_factory=list)


def _signature_update(h, *arrays):
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())


def evaluate(grid: OccupancyGrid, fs, views, config: LossConfig | None = None, seed=0,
             sampling="stratified", semantic=False, sem_stride=4, backward=True,
             signature=False, chunk_views: int | None = None) -> ObjectiveResult:
    """Loss (and, with ``backward``, accumulated grid gradients) for ``views``.

    ``semantic`` adds cross-entropy on the key-frame views' labelled pixels.
    Gradients are *added* to ``grid.grad_*``; call ``grid.zero_grad()`` first.
    ``signature`` hashes every discrete decision (bilinear cells, validity,
    argmin source, auto-mask, SSIM clamp, L1 sign) so finite-difference
    checks can skip perturbations that cross a kink.
    """
    cfg = config or LossConfig()
    rng = np.random.default_rng(seed)
    if not backward and chunk_views:
        return _evaluate_chunked(grid, fs, views, cfg, rng, sampling, semantic, sem_stride, chunk_views)
    want_sem = semantic and cfg.lam > 0 and grid.num_classes > 0 and fs.labels is not None

    origins, dirs, slices = [], [], []
    start = 0
    for view in views:
        cam = fs.camera_in_key(view.frame, view.camera)
        o, d = generate_rays(cam, view.u.reshape(-1).astype(np.float64), view.v.reshape(-1).astype(np.float64))
        origins.append(o)
        dirs.append(d)
        slices.append(slice(start, start + o.shape[0]))
        start += o.shape[0]
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    dnorm = np.linalg.norm(dirs, axis=-1)
    samples = sample_rays(origins, dirs, grid.contraction, grid.d_v, rng, sampling)
    rp = forward_rays(grid, samples)
    z = rp.rendered.depth / dnorm

    h = hashlib.sha1() if signature else None
    pe_maps, pe_masks, caches = [], [], []
    F = fs.num_frames
    for view, sl in zip(views, slices):
        f, c = view.frame, view.camera
        cam = fs.rig[c]
        zv = z[sl].reshape(view.u.shape)
        target = fs.images[f, c][view.v, view.u]
        uu, vv = view.u.astype(np.float64), view.v.astype(np.float64)
        losses, idents, per_src = [], [], []
        for s in (f - 1, f + 1):
            if not 0 <= s < F:
                continue
            wr = warp_pixels(uu, vv, zv, cam, cam, fs.relative(f, s), fs.images[s, c])
            warped = np.where(wr.valid[..., None], wr.image, target)
            pe, pc = photometric_error(target, warped, cfg, return_cache=True)
            losses.append(np.where(wr.valid, pe, np.inf))
            idents.append(photometric_error(target, fs.images[s, c][view.v, view.u], cfg))
            per_src.append((wr, pc))
            if h is not None:
                _signature_update(h, np.floor(wr.u), np.floor(wr.v), wr.valid,
                                  (pc.ssim.S > 0) & (pc.ssim.S < 1), np.sign(pc.resid))
        best, mask, arg = min_reprojection(losses, idents, cfg.automask)
        if h is not None:
            _signature_update(h, arg, mask)
        pe_maps.append(best)
        pe_masks.append(mask)
        caches.append((arg, per_src))

    sem_ce, sem_state = None, None
    if want_sem:
        rows, labs = [], []
        for view, sl in zip(views, slices):
            if view.frame != fs.key:
                continue
            lab = fs.labels[view.frame, view.camera][view.v, view.u].reshape(-1)
            keep = np.nonzero(lab != UNCERTAIN)[0]
            rows.append(np.arange(sl.start, sl.stop)[keep])
            labs.append(lab[keep])
        if rows and sum(r.size for r in rows):
            rows = np.concatenate(rows)
            labs = np.concatenate(labs)
            sub = _subset_samples(samples, rows).strided(sem_stride)
            srp = forward_rays(grid, sub, with_semantics=True)
            sem_ce, g_sem, _ = cross_entropy(srp.rendered.semantics, labs)
            sem_state = (srp, g_sem)

    terms = total_loss(pe_maps, pe_masks, sem_ce, cfg)
    result = ObjectiveResult(terms, h.hexdigest() if h is not None else None, pe_maps, pe_masks)
    if not backward:
        return result

    grad_z = np.zeros_like(z)
    for (arg, per_src), g_map, sl, view in zip(caches, terms.pe_grads, slices, views):
        gz = np.zeros(view.u.shape)
        for j, (wr, pc) in enumerate(per_src):
            gj = np.where(arg == j, g_map, 0.0)
            if not np.any(gj):
                continue
            gw = photometric_error_backward(pc, gj)
            gw = np.where(wr.valid[..., None], gw, 0.0)
            gz += warp_backward(wr, gw)
        grad_z[sl] = gz.reshape(-1)
    backward_rays(grid, rp, grad_depth=grad_z / dnorm)
    if sem_state is not None:
        srp, g_sem = sem_state
        backward_rays(grid, srp, grad_semantics=cfg.lam * g_sem)
    return result


def _subset_samples(samples, rows):
    from .sampler import RaySamples

    return RaySamples(samples.t[rows], samples.delta[rows], samples.mask[rows], samples.count[rows],
                      samples.r_b[rows], samples.u[rows], samples.points[rows],
                      samples.contracted[rows])


def _evaluate_chunked(grid, fs, views, cfg, rng, sampling, semantic, sem_stride, chunk):
    """Forward-only evaluation in groups of views to bound memory.

    Each group draws from the same generator in order, so the result matches
    an unchunked call only in expectation; use ``midpoint`` sampling for
    reproducible evaluation.
    """
    maps, masks = [], []
    ce_sum, ce_n = 0.0, 0
    for i in range(0, len(views), chunk):
        sub = evaluate(grid, fs, views[i:i + chunk], cfg, rng, sampling, semantic, sem_stride,
                       backward=False)
        maps += sub.view_losses
        masks += sub.view_masks
        if sub.terms.semantic:
            ce_sum += sub.terms.semantic
            ce_n += 1
    terms = total_loss(maps, masks, ce_sum / ce_n if ce_n else None, cfg)
    return ObjectiveResult(terms, None, maps, masks)
