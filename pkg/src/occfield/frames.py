from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .geometry import CameraModel, Pose


@dataclass
class FrameSet:
    """A short posed multi-camera sequence.

    ``images`` is ``(F, N, H, W, C)`` float in [0, 1]; ``labels`` and
    ``depths`` (z-depth, inf for background) share the leading ``(F, N, H, W)``.
    The occupancy grid lives in the ego frame of frame ``key``.
    """

    rig: list
    poses: list
    images: np.ndarray
    labels: np.ndarray | None = None
    depths: np.ndarray | None = None
    key: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        F, N = self.images.shape[:2]
        if len(self.poses) != F or len(self.rig) != N:
            raise ConfigurationError("frame/camera counts do not match poses and rig")
        H, W = self.images.shape[2:4]
        for cam in self.rig:
            if (cam.height, cam.width) != (H, W):
                raise ConfigurationError("all rig cameras must share the image size")
        if self.labels is not None and self.labels.shape != self.images.shape[:4]:
            raise ConfigurationError("label maps must align with images")
        if self.key is None:
            self.key = F // 2

    @classmethod
    def from_renders(cls, rig, poses, frames) -> "FrameSet":
        images = np.stack([[v["image"] for v in f] for f in frames])
        labels = np.stack([[v["label"] for v in f] for f in frames])
        depths = np.stack([[v["depth"] for v in f] for f in frames])
        return cls(list(rig), list(poses), images, labels, depths)

    @property
    def num_frames(self) -> int:
        return self.images.shape[0]

    @property
    def num_cameras(self) -> int:
        return self.images.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def key_from_frame(self, f: int) -> Pose:
        return self.poses[self.key].inverse() @ self.poses[f]

    def relative(self, target: int, source: int) -> Pose:
        """Maps target-frame ego coordinates to source-frame ego coordinates."""
        return self.poses[source].inverse() @ self.poses[target]

    def camera_in_key(self, f: int, c: int) -> CameraModel:
        cam = self.rig[c]
        return replace(cam, ego_from_camera=self.key_from_frame(f) @ cam.ego_from_camera)

    def with_images(self, images) -> "FrameSet":
        return replace(self, images=np.asarray(images, dtype=np.float64))
