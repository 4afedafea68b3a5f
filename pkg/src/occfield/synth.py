"""Analytic test scenes: textured planes, spheres and boxes seen by a camera rig
on a moving ego vehicle.

Everything here is exact (closed-form intersections, signed distances), so it
serves as ground truth for depth, labels and voxel occupancy.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError
from .geometry import CameraModel, Pose, look_rotation, rotation_z

UNCERTAIN = 255
FREE = 255
HIT_EPS = 1e-6


# -- textures ------------------------------------------------------------------

def _hash01(i, j, seed):
    """Deterministic per-cell pseudo-random numbers in [0, 1), shape ``(..., 3)``."""
    i = np.asarray(i, dtype=np.int64).astype(np.uint64)
    j = np.asarray(j, dtype=np.int64).astype(np.uint64)
    out = []
    with np.errstate(over="ignore"):
        for c in range(3):
            h = (i * np.uint64(0x9E3779B97F4A7C15) ^ j * np.uint64(0xC2B2AE3D27D4EB4F)
                 ^ np.uint64((seed * 3 + c) * 0x165667B19E3779F9 % 2**64))
            h ^= h >> np.uint64(31)
            h *= np.uint64(0xBF58476D1CE4E5B9)
            h ^= h >> np.uint64(27)
            h *= np.uint64(0x94D049BB133111EB)
            h ^= h >> np.uint64(33)
            out.append((h >> np.uint64(11)).astype(np.float64) / 2.0**53)
    return np.stack(out, -1)


@dataclass
class Texture:
    kind: str = "checker"
    cell: float = 0.5
    seed: int = 0
    tint: float = 0.35

    def __post_init__(self):
        if self.kind not in ("checker", "stripes", "noise"):
            raise ConfigurationError(f"unknown texture kind {self.kind!r}")
        if not self.cell > 0:
            raise ConfigurationError("texture cell size must be positive")

    def color(self, s, t):
        i = np.floor(np.asarray(s) / self.cell).astype(np.int64)
        j = np.floor(np.asarray(t) / self.cell).astype(np.int64)
        rnd = _hash01(i, j, self.seed)
        if self.kind == "noise":
            return 0.1 + 0.8 * rnd
        parity = (i + j) % 2 if self.kind == "checker" else i % 2
        base = np.where(parity[..., None] == 1, 0.8, 0.2)
        return (1 - self.tint) * base + self.tint * rnd


# -- primitives ------------------------------------------------------------------

def _tangent_basis(n):
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


@dataclass
class Primitive:
    kind: str
    category_id: int
    texture: Texture = field(default_factory=Texture)
    # plane
    point: np.ndarray | None = None
    normal: np.ndarray | None = None
    # sphere / box
    center: np.ndarray | None = None
    radius: float | None = None
    size: np.ndarray | None = None
    yaw: float = 0.0

    def __post_init__(self):
        if self.kind == "plane":
            if self.point is None or self.normal is None:
                raise ConfigurationError("plane needs point and normal")
            self.point = np.asarray(self.point, dtype=np.float64)
            self.normal = np.asarray(self.normal, dtype=np.float64)
            self.normal = self.normal / np.linalg.norm(self.normal)
        elif self.kind == "sphere":
            if self.center is None or not (self.radius or 0) > 0:
                raise ConfigurationError("sphere needs center and positive radius")
            self.center = np.asarray(self.center, dtype=np.float64)
        elif self.kind == "box":
            if self.center is None or self.size is None:
                raise ConfigurationError("box needs center and size")
            self.center = np.asarray(self.center, dtype=np.float64)
            self.size = np.asarray(self.size, dtype=np.float64)
            if np.any(self.size <= 0):
                raise ConfigurationError("box size must be positive")
        else:
            raise ConfigurationError(f"unknown primitive kind {self.kind!r}")
        if not 0 <= int(self.category_id) < 255:
            raise ConfigurationError("category_id must be in [0, 254]")

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        d = dict(d)
        tex = Texture(**d.pop("texture", {}))
        yaw = np.radians(d.pop("yaw_deg", 0.0))
        return cls(texture=tex, yaw=yaw, **d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "category_id": int(self.category_id),
               "texture": {"kind": self.texture.kind, "cell": self.texture.cell,
                           "seed": self.texture.seed, "tint": self.texture.tint}}
        if self.kind == "plane":
            out.update(point=self.point.tolist(), normal=self.normal.tolist())
        elif self.kind == "sphere":
            out.update(center=self.center.tolist(), radius=float(self.radius))
        else:
            out.update(center=self.center.tolist(), size=self.size.tolist(),
                       yaw_deg=float(np.degrees(self.yaw)))
        return out

    # world points -> signed distance (negative inside)
    def sdf(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "plane":
            return (p - self.point) @ self.normal
        if self.kind == "sphere":
            return np.linalg.norm(p - self.center, axis=-1) - self.radius
        q = np.abs((p - self.center) @ rotation_z(self.yaw)) - 0.5 * self.size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(-1), 0.0)

    def intersect(self, o, d):
        """Closest hit distance along ``d`` (inf on miss) and 2D surface coordinates."""
        o = np.asarray(o, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        n = o.shape[0]
        st = np.zeros((n, 2))
        if self.kind == "plane":
            denom = d @ self.normal
            num = (self.point - o) @ self.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            t = np.where(t > HIT_EPS, t, np.inf)
            e1, e2 = _tangent_basis(self.normal)
            hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            st = np.stack([(hit - self.point) @ e1, (hit - self.point) @ e2], -1)
            return t, st
        if self.kind == "sphere":
            oc = o - self.center
            a = (d * d).sum(-1)
            b = (oc * d).sum(-1)
            c = (oc * oc).sum(-1) - self.radius**2
            disc = b * b - a * c
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            t = np.where(t0 > HIT_EPS, t0, np.where(t1 > HIT_EPS, t1, np.inf))
            t = np.where(disc >= 0, t, np.inf)
            hit = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            r = np.linalg.norm(hit, axis=-1)
            lon = np.arctan2(hit[:, 1], hit[:, 0])
            lat = np.arcsin(np.clip(hit[:, 2] / np.maximum(r, 1e-12), -1, 1))
            return t, np.stack([lon * self.radius, lat * self.radius], -1)
        R = rotation_z(self.yaw)
        ol = (o - self.center) @ R
        dl = d @ R
        half = 0.5 * self.size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            t1 = (-half - ol) * inv
            t2 = (half - ol) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = tmin.max(-1)
        tfar = tmax.min(-1)
        hit_ok = tfar >= np.maximum(tnear, HIT_EPS)
        t = np.where(tnear > HIT_EPS, tnear, tfar)
        t = np.where(hit_ok, t, np.inf)
        axis = np.where(tnear > HIT_EPS, tmin.argmax(-1), tmax.argmin(-1))
        hl = ol + np.where(np.isfinite(t), t, 0.0)[:, None] * dl
        # texture coordinates: the two local axes other than the face normal
        other = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        rows = np.arange(n)
        st = np.stack([hl[rows, other[:, 0]], hl[rows, other[:, 1]]], -1)
        return t, st


# -- scene ---------------------------------------------------------------------

def _trajectory_from_dict(traj) -> list[Pose]:
    if isinstance(traj, list):
        return [Pose.from_matrix(np.asarray(m, dtype=np.float64)) for m in traj]
    n = int(traj["frames"])
    start = np.asarray(traj.get("start", [0, 0, 0]), dtype=np.float64)
    step = np.asarray(traj.get("step", [0, 0, 0]), dtype=np.float64)
    yaw0 = np.radians(traj.get("yaw_deg", 0.0))
    dyaw = np.radians(traj.get("yaw_rate_deg", 0.0))
    return [Pose(rotation_z(yaw0 + k * dyaw), start + k * step) for k in range(n)]


def _camera_from_dict(d: dict) -> CameraModel:
    if "fx" in d:
        return CameraModel.from_dict(d)
    R = look_rotation(np.radians(d.get("yaw_deg", 0.0)), np.radians(d.get("pitch_deg", 0.0)))
    pose = Pose(R, np.asarray(d.get("position", [0, 0, 0]), dtype=np.float64))
    return CameraModel.from_fov(int(d["width"]), int(d["height"]), float(d["hfov_deg"]), pose)


@dataclass
class SceneSpec:
    primitives: list
    rig: list
    trajectory: list
    holdout_rig: list = field(default_factory=list)
    background: tuple = (0.55, 0.7, 0.9)
    supersample: int = 3
    blur_px: float = 0.0
    name: str = "scene"
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.primitives:
            raise ConfigurationError("scene needs at least one primitive")
        if not self.rig or not self.trajectory:
            raise ConfigurationError("scene needs a camera rig and at least one frame")
        if self.blur_px < 0:
            raise ConfigurationError("blur_px must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            return cls(primitives=[Primitive.from_dict(p) for p in d["primitives"]],
                       rig=[_camera_from_dict(c) for c in d["rig"]],
                       trajectory=_trajectory_from_dict(d["trajectory"]),
                       holdout_rig=[_camera_from_dict(c) for c in d.get("holdout_rig", [])],
                       background=tuple(d.get("background", (0.55, 0.7, 0.9))),
                       supersample=int(d.get("supersample", 3)),
                       blur_px=float(d.get("blur_px", 0.0)),
                       name=d.get("name", "scene"), raw=copy.deepcopy(d))
        except KeyError as e:
            raise ConfigurationError(f"scene spec is missing {e}") from None

    @property
    def num_frames(self) -> int:
        return len(self.trajectory)

    @property
    def categories(self) -> list[int]:
        return sorted({int(p.category_id) for p in self.primitives})

    def trace(self, o, d):
        """Closest hit over all primitives: ``(t, primitive index, surface coords)``."""
        n = o.shape[0]
        best = np.full(n, np.inf)
        which = np.full(n, -1, dtype=np.int64)
        st = np.zeros((n, 2))
        for k, prim in enumerate(self.primitives):
            t, s = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
            st = np.where(closer[:, None], s, st)
        return best, which, st

    def shade(self, which, st):
        col = np.tile(np.asarray(self.background, dtype=np.float64), (which.shape[0], 1))
        for k, prim in enumerate(self.primitives):
            sel = which == k
            if np.any(sel):
                col[sel] = prim.texture.color(st[sel, 0], st[sel, 1])
        return col


def render_camera(scene: SceneSpec, camera: CameraModel, world_from_ego: Pose):
    """Ground-truth ``(image HxWx3, z-depth HxW, labels HxW uint8)`` for one camera."""
    world_from_cam = world_from_ego @ camera.ego_from_camera
    H, W = camera.height, camera.width
    u, v = camera.pixel_grid()
    # depth and labels at pixel centers
    d_cam = camera.camera_directions(u, v)
    o = np.broadcast_to(world_from_cam.translation, d_cam.shape)
    d = world_from_cam.rotate(d_cam)
    t, which, _ = scene.trace(o, d)
    depth = t.reshape(H, W)  # d has camera z == 1, so t is z-depth
    labels = np.full(H * W, UNCERTAIN, dtype=np.uint8)
    hit = which >= 0
    cats = np.array([p.category_id for p in scene.primitives], dtype=np.uint8)
    labels[hit] = cats[which[hit]]
    # box-filtered color from a regular subpixel grid
    ss = max(int(scene.supersample), 1)
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    col = np.zeros((H * W, 3))
    for dy in offs:
        for dx in offs:
            dc = camera.camera_directions(u + dx, v + dy)
            t_s, w_s, st_s = scene.trace(o, world_from_cam.rotate(dc))
            col += scene.shade(w_s, st_s)
    col = (col / (ss * ss)).reshape(H, W, 3)
    if scene.blur_px > 0:
        # Gaussian point-spread function of the simulated lens
        col = gaussian_filter(col, (scene.blur_px, scene.blur_px, 0.0), mode="nearest")
    return col, depth, labels.reshape(H, W)


def render_ground_truth(scene: SceneSpec, frame: int, holdout: bool = False) -> list[dict]:
    rig = scene.holdout_rig if holdout else scene.rig
    pose = scene.trajectory[frame]
    out = []
    for cam in rig:
        img, depth, lab = render_camera(scene, cam, pose)
        out.append({"image": img, "depth": depth, "label": lab})
    return out


def voxelize_occupancy(scene: SceneSpec, grid, frame: int | None = None, mode: str = "shell",
                       shell: float | None = None):
    """Oracle occupancy over the inside block of ``grid``.

    The grid lives in the ego frame of ``frame`` (default: the middle frame).
    A voxel is occupied when its center lies inside a primitive; in ``shell``
    mode only centers within ``shell`` meters of the surface count (default:
    one voxel edge), matching what cameras can actually observe.
    Returns ``(occupied bool, labels uint8)`` with ``FREE`` for empty voxels.
    """
    if frame is None:
        frame = scene.num_frames // 2
    centers = grid.inside_voxel_centers()
    world = scene.trajectory[frame].apply(centers)
    if shell is None:
        shell = float(np.max(grid.voxel_size))
    occ = np.zeros(centers.shape[:3], dtype=bool)
    labels = np.full(centers.shape[:3], FREE, dtype=np.uint8)
    for prim in scene.primitives:
        sd = prim.sdf(world)
        inside = sd <= 0.0
        if mode == "shell":
            inside &= sd > -shell
        new = inside & ~occ
        labels[new] = prim.category_id
        occ |= inside
    return occ, labels


def synthesize(scene: SceneSpec):
    """Render every frame for the training rig and the held-out rig."""
    from .frames import FrameSet

    frames = [render_ground_truth(scene, f) for f in range(scene.num_frames)]
    fs = FrameSet.from_renders(scene.rig, scene.trajectory, frames)
    hold = None
    if scene.holdout_rig:
        hframes = [render_ground_truth(scene, f, holdout=True) for f in range(scene.num_frames)]
        hold = FrameSet.from_renders(scene.holdout_rig, scene.trajectory, hframes)
    return fs, hold
