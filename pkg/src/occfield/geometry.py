"""Rigid poses, pinhole cameras, ray generation and bilinear image sampling.

Camera frames follow the OpenCV convention (x right, y down, z forward).
Pixel ``(u, v)`` with integer coordinates refers to the center of column
``u``, row ``v``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p_out = R @ p_in + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHO_TOL, rtol=0) or np.linalg.det(R) < 0:
            raise InvalidParameterError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise InvalidParameterError("last row of a rigid transform must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


def rotation_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Ego-from-camera rotation for a camera facing ``yaw`` (about ego +z, x forward,
    y left, z up), tilted down by ``pitch`` radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    ego_from_camera: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")
        if not isinstance(self.ego_from_camera, Pose):
            object.__setattr__(self, "ego_from_camera", Pose.from_matrix(self.ego_from_camera))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return self.ego_from_camera.translation.copy()

    @classmethod
    def from_fov(cls, width, height, hfov_deg, ego_from_camera=None) -> "CameraModel":
        fx = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(fx, fx, (width - 1) / 2, (height - 1) / 2, int(width), int(height),
                   ego_from_camera or Pose())

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "ego_from_camera": self.ego_from_camera.matrix().reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   Pose.from_matrix(np.asarray(d["ego_from_camera"], dtype=np.float64)))

    def pixel_grid(self):
        """All pixel centers as flat ``(u, v)`` arrays in row-major order."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.reshape(-1).astype(np.float64), v.reshape(-1).astype(np.float64)

    def camera_directions(self, u, v):
        """Camera-frame directions ``(x, y, 1)`` through pixels; z-component is 1."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project_camera(self, points_cam):
        """Project camera-frame points; returns ``u, v, depth, valid``."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        valid = z > 0
        zs = np.where(valid, z, 1.0)
        u = self.fx * p[..., 0] / zs + self.cx
        v = self.fy * p[..., 1] / zs + self.cy
        return u, v, z, valid


def project(points, camera: CameraModel):
    """Project ego-frame points into ``camera``.

    Returns ``(u, v, depth, valid)``; ``valid`` is False for points at or behind
    the camera plane (their ``u, v`` are meaningless).
    """
    cam = camera.ego_from_camera.inverse().apply(points)
    return camera.project_camera(cam)


def generate_rays(camera: CameraModel, u, v):
    """Ego-frame rays through pixels.

    Directions are not normalized: their camera-frame z-component is 1, so the
    ray parameter along them equals camera z-depth.
    """
    d_cam = camera.camera_directions(u, v)
    dirs = camera.ego_from_camera.rotate(d_cam)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float] | None = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not np.linalg.norm(d) > 0:
            raise InvalidParameterError("ray direction must be non-zero")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


def rays_for_pixels(camera: CameraModel, pixels) -> list[Ray]:
    pixels = [(float(u), float(v)) for u, v in pixels]
    if not pixels:
        return []
    u, v = np.array(pixels).T
    o, d = generate_rays(camera, u, v)
    return [Ray(o[i], d[i], pixels[i]) for i in range(len(pixels))]


def _bilinear_setup(shape, u, v):
    H, W = shape[0], shape[1]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(np.where(np.isfinite(u), u, 0.0), 0, W - 1)
    vc = np.clip(np.where(np.isfinite(v), v, 0.0), 0, H - 1)
    x0 = np.minimum(np.floor(uc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fu = uc - x0
    fv = vc - y0
    return valid, x0, y0, x1, y1, fu, fv


def bilinear_sample(image, u, v, with_grad: bool = False):
    """Sample an ``H×W×C`` (or ``H×W``) image at continuous pixel coordinates.

    Points outside ``[0, W-1] × [0, H-1]`` are flagged invalid; their values are
    computed from the clamped position and must be ignored by callers.
    With ``with_grad`` also returns the spatial derivatives ``dI/du, dI/dv``.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    valid, x0, y0, x1, y1, fu, fv = _bilinear_setup(img.shape, u, v)
    i00 = img[y0, x0]
    i10 = img[y0, x1]
    i01 = img[y1, x0]
    i11 = img[y1, x1]
    fu_ = fu[..., None]
    fv_ = fv[..., None]
    top = i00 + fu_ * (i10 - i00)
    bot = i01 + fu_ * (i11 - i01)
    val = top + fv_ * (bot - top)
    if squeeze:
        val = val[..., 0]
    if not with_grad:
        return val, valid
    du = (1 - fv_) * (i10 - i00) + fv_ * (i11 - i01)
    dv = bot - top
    if squeeze:
        du, dv = du[..., 0], dv[..., 0]
    return val, valid, du, dv
