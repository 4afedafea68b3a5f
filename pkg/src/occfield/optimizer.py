"""Direct optimization of grid parameters, plus the finite-difference gradient check."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .contraction import ContractionParams
from .errors import ConfigurationError, NumericalError
from .grid import WEIGHT_MODE, OccupancyGrid
from .objective import evaluate, full_image_views, random_patch_views
from .photometric import LossConfig
from .renderer import render, render_backward

log = logging.getLogger(__name__)


@dataclass
class GridConfig:
    dims: tuple = (72, 72, 12)
    alpha: float = 0.667
    inside_min: tuple = (-12.0, -12.0, -1.25)
    inside_max: tuple = (12.0, 12.0, 2.75)
    mode: str = WEIGHT_MODE
    init_opacity: float = 0.01
    num_classes: int = 15
    # None centers the contraction on the box midpoint
    inside_center: tuple | None = None

    def build(self) -> OccupancyGrid:
        center = None if self.inside_center is None else tuple(self.inside_center)
        params = ContractionParams(self.alpha, tuple(self.inside_min), tuple(self.inside_max), center)
        return OccupancyGrid.create(self.dims, params, self.num_classes, self.mode, self.init_opacity)


@dataclass
class FitConfig:
    steps: int = 2000
    lr: float = 1e-2
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    rays_per_step: int = 2352
    patch_size: int = 7
    render_frames: int = 3
    window: int = 5
    sem_divisor: int = 4
    sampling: str = "stratified"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if isinstance(self.grid, dict):
            self.grid = GridConfig(**self.grid)
        for name in ("steps", "rays_per_step", "patch_size", "render_frames", "window", "sem_divisor"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.window < self.render_frames + 2:
            raise ConfigurationError("window must cover one extra frame on each side of the rendered frames")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        d["grid"]["dims"] = list(self.grid.dims)
        d["grid"]["inside_min"] = list(self.grid.inside_min)
        d["grid"]["inside_max"] = list(self.grid.inside_max)
        if self.grid.inside_center is not None:
            d["grid"]["inside_center"] = list(self.grid.inside_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown fit config keys: {sorted(unknown)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if isinstance(d.get("grid"), dict):
            g = dict(d["grid"])
            for k in ("dims", "inside_min", "inside_max"):
                if k in g:
                    g[k] = tuple(g[k])
            d["grid"] = GridConfig(**g)
        return cls(**d)


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for k, p in params.items():
            p -= self.lr * grads[k]


def make_optimizer(cfg: FitConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.betas, cfg.eps)
    return SGD(cfg.lr)


def _params(grid):
    p = {"opacity": grid.opacity_raw}
    g = {"opacity": grid.grad_opacity}
    if grid.semantic_raw is not None:
        p["semantic"] = grid.semantic_raw
        g["semantic"] = grid.grad_semantic
    return p, g


def frame_schedule(num_frames: int, key: int, render_frames: int, window: int):
    """Rendered frames around ``key`` such that every one has a neighbour on both sides
    inside the supervision window (clipped to the available frames)."""
    half = render_frames // 2
    lo = max(key - half, 1 if num_frames > 2 else 0)
    hi = min(key + half, num_frames - 2 if num_frames > 2 else num_frames - 1)
    wl = key - window // 2
    wh = key + window // 2
    return [f for f in range(lo, hi + 1) if wl < f < wh or num_frames <= 2]


@dataclass
class FitResult:
    grid: OccupancyGrid
    log: list
    steps: int


def fit(grid: OccupancyGrid, fs, config: FitConfig, log_path=None, progress=None) -> FitResult:
    """Optimize ``grid`` in place against the photometric (+ semantic) objective."""
    cfg = config
    semantic = cfg.loss.lam > 0
    if semantic and (fs.labels is None or grid.num_classes == 0):
        raise ConfigurationError("lambda > 0 needs label maps and a grid with semantic classes")
    frames = frame_schedule(fs.num_frames, fs.key, cfg.render_frames, cfg.window)
    nviews = len(frames) * fs.num_cameras
    patches = max(1, cfg.rays_per_step // (nviews * cfg.patch_size**2))
    opt = make_optimizer(cfg)
    rows = []
    writer, fh = None, None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L_pe", "L_sem", "total"])
    try:
        for step in range(cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            views = random_patch_views(fs, frames, rng, patches, cfg.patch_size)
            grid.zero_grad()
            try:
                res = evaluate(grid, fs, views, cfg.loss, seed=rng, sampling=cfg.sampling,
                               semantic=semantic, sem_stride=cfg.sem_divisor, backward=True)
            except NumericalError as e:
                raise NumericalError(f"{e} at step {step}", step=step) from e
            t = res.terms
            if not (math.isfinite(t.total) and np.all(np.isfinite(grid.grad_opacity))):
                raise NumericalError(f"non-finite loss or gradient at step {step}", step=step)
            row = {"step": step, "L_pe": t.photometric, "L_sem": t.semantic, "total": t.total}
            rows.append(row)
            if writer is not None:
                writer.writerow([step, repr(t.photometric), repr(t.semantic), repr(t.total)])
            params, grads = _params(grid)
            opt.step(params, grads)
            if progress is not None:
                progress(step, row)
    finally:
        if fh is not None:
            fh.close()
    grid.zero_grad()
    return FitResult(grid, rows, cfg.steps)


def evaluate_photometric(grid, fs, config: FitConfig, frames=None):
    """Deterministic full-image photometric loss over the rendered frames."""
    if frames is None:
        frames = frame_schedule(fs.num_frames, fs.key, config.render_frames, config.window)
    views = full_image_views(fs, frames)
    res = evaluate(grid, fs, views, config.loss, seed=0, sampling="midpoint", semantic=False,
                   backward=False, chunk_views=1)
    return res.terms.photometric


# -- gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    zero_support_max_abs: float
    tolerance: float
    worst_index: int | None = None
    rel_errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.zero_support_max_abs == 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rel_errors")
        d["passed"] = self.passed
        return d


def relative_error(a, n, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / scale


def check_renderer_gradients(num_rays=16, num_samples=16, mode=WEIGHT_MODE, h=1e-4, seed=0,
                             tolerance=1e-3) -> GradCheckReport:
    """Depth-only path: analytic d(sum g*D)/d(alpha or sigma) vs central differences."""
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.2, 1.0, (num_rays, num_samples)), axis=1)
    delta = np.diff(t, axis=1, append=t[:, -1:] + (t[:, -1:] - t[:, -2:-1]))
    if mode == WEIGHT_MODE:
        vals = rng.uniform(0.05, 0.6, t.shape)
    else:
        vals = rng.uniform(0.05, 1.5, t.shape)
    g = rng.normal(size=num_rays)

    def f(x):
        return float((render(t, delta, x, mode).depth * g).sum())

    r = render(t, delta, vals, mode)
    ana, _, _ = render_backward(r, t, delta, vals, mode, grad_depth=g)
    num = np.zeros_like(vals)
    for idx in np.ndindex(vals.shape):
        xp = vals.copy()
        xp[idx] += h
        xm = vals.copy()
        xm[idx] -= h
        num[idx] = (f(xp) - f(xm)) / (2 * h)
    rel = relative_error(ana, num).reshape(-1)
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel.max()), rel.size, 0, 0.0, tolerance, worst, rel.tolist())


def support_mask(grid: OccupancyGrid, fs, views, sampling, seed):
    """Voxels touched (with non-zero trilinear weight) by the view rays."""
    from .geometry import generate_rays
    from .sampler import sample_rays

    rng = np.random.default_rng(seed)
    o, d = [], []
    for view in views:
        cam = fs.camera_in_key(view.frame, view.camera)
        oo, dd = generate_rays(cam, view.u.reshape(-1).astype(float), view.v.reshape(-1).astype(float))
        o.append(oo)
        d.append(dd)
    s = sample_rays(np.concatenate(o), np.concatenate(d), grid.contraction, grid.d_v, rng, sampling)
    flat, w = grid.trilinear_corners(s.contracted)
    touched = np.zeros(int(np.prod(grid.dims)), dtype=bool)
    touched[flat[s.mask & np.ones(flat.shape[:-1], bool)][(w[s.mask] > 0)]] = True
    return touched.reshape(grid.dims)


def gradient_check(grid: OccupancyGrid, fs, views=None, loss: LossConfig | None = None,
                   num_params=200, h=1e-3, seed=0, tolerance=5e-3, semantic=False,
                   sampling="stratified") -> GradCheckReport:
    """Compare analytic total-loss gradients with central differences on raw opacity.

    Parameters are drawn from the voxels the rays actually touch.  A
    perturbation whose forward pass changes any discrete decision (a kink of
    bilinear sampling, validity, min-reprojection, auto-mask, SSIM clamp or L1
    sign) is skipped and counted in ``skipped_kinks``.  Voxels with no support
    must receive exactly zero gradient.
    """
    loss = loss or LossConfig()
    if views is None:
        views = full_image_views(fs, range(1, fs.num_frames - 1))
    work = grid.copy()
    work.zero_grad()
    base = evaluate(work, fs, views, loss, seed=seed, sampling=sampling, semantic=semantic,
                    backward=True, signature=True)
    analytic = work.grad_opacity.copy()
    touched = support_mask(work, fs, views, sampling, seed)
    zero_support = float(np.abs(analytic[~touched]).max()) if np.any(~touched) else 0.0

    rng = np.random.default_rng(seed + 1)
    candidates = np.flatnonzero(touched.reshape(-1))
    rng.shuffle(candidates)
    flat_raw = work.opacity_raw.reshape(-1)
    rels, skipped, worst, worst_rel = [], 0, None, -1.0
    for idx in candidates:
        if len(rels) >= num_params:
            break
        keep = flat_raw[idx]
        vals, sigs = [], []
        for sgn in (1.0, -1.0):
            flat_raw[idx] = keep + sgn * h
            r = evaluate(work, fs, views, loss, seed=seed, sampling=sampling, semantic=semantic,
                         backward=False, signature=True)
            vals.append(r.terms.total)
            sigs.append(r.signature)
        flat_raw[idx] = keep
        if sigs[0] != base.signature or sigs[1] != base.signature:
            skipped += 1
            continue
        num = (vals[0] - vals[1]) / (2 * h)
        rel = float(relative_error(analytic.reshape(-1)[idx], num, floor=1e-9))
        rels.append(rel)
        if rel > worst_rel:
            worst_rel, worst = rel, int(idx)
    return GradCheckReport(max(rels) if rels else float("nan"), len(rels), skipped, zero_support,
                           tolerance, worst, rels)
