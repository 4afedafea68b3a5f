"""File formats: PFM depth, PNG/PPM images, the OCCF grid checkpoint, JSON.

Byte-level layouts are documented in docs/formats.md.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .contraction import ContractionParams
from .errors import ConfigurationError
from .frames import FrameSet
from .geometry import CameraModel, Pose
from .grid import DENSITY_MODE, WEIGHT_MODE, OccupancyGrid

GRID_MAGIC = b"OCCF"
GRID_VERSION = 1
_MODE_CODES = {WEIGHT_MODE: 0, DENSITY_MODE: 1}
_GRID_HEADER = struct.Struct("<4sI3I3III I d 3d 3d 3d")


# -- JSON ----------------------------------------------------------------------

def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from None


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- PFM -----------------------------------------------------------------------

def write_pfm(path, data):
    """Little-endian PFM, rows stored bottom-to-top as the format requires."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        tag, h, w = b"Pf", data.shape[0], data.shape[1]
    elif data.ndim == 3 and data.shape[2] == 3:
        tag, h, w = b"PF", data.shape[0], data.shape[1]
    else:
        raise ValueError("PFM holds HxW or HxWx3 arrays")
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ConfigurationError(f"{path}: not a PFM file")
        dims = re.findall(rb"\d+", f.readline())
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(w * h * chans * 4), dtype=dtype)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


# -- images --------------------------------------------------------------------

def write_image(path, img):
    """Float [0, 1] HxWx3 image as 8-bit PPM/PNG (by extension)."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_depth_png(path, depth):
    """16-bit PNG in millimeters; non-finite and out-of-range depths become 0."""
    d = np.asarray(depth, dtype=np.float64)
    mm = np.where(np.isfinite(d), np.round(d * 1000.0), 0.0)
    mm = np.where((mm > 0) & (mm <= 65535), mm, 0).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0


def write_label_png(path, labels, palette: dict | None = None):
    """8-bit indexed PNG; ``palette`` maps id -> (r, g, b)."""
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L")
    pal = np.zeros((256, 3), dtype=np.uint8)
    for k, rgb in (palette or {}).items():
        pal[int(k)] = rgb
    im.putpalette(pal.reshape(-1).tolist())
    im.save(path)


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ConfigurationError(f"{path}: label maps must be 8-bit indexed")
        return np.asarray(im, dtype=np.uint8)


def write_mask_png(path, mask):
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


# -- grid checkpoint -----------------------------------------------------------

def save_grid(path, grid: OccupancyGrid):
    c = grid.contraction
    has_center = c.inside_center is not None
    header = _GRID_HEADER.pack(
        GRID_MAGIC, GRID_VERSION, *grid.dims, *grid.inside_dims, grid.num_classes,
        _MODE_CODES[grid.mode], int(has_center), float(c.alpha), *c.inside_min, *c.inside_max,
        *(c.center if has_center else (0.0, 0.0, 0.0)))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.opacity_raw, dtype="<f4").tobytes())
        if grid.semantic_raw is not None:
            f.write(np.ascontiguousarray(grid.semantic_raw, dtype="<f4").tobytes())


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _GRID_HEADER.size or blob[:4] != GRID_MAGIC:
        raise ConfigurationError(f"{path}: not an OCCF grid file")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != GRID_VERSION:
        raise ConfigurationError(f"{path}: unsupported OCCF version {version}")
    fields = _GRID_HEADER.unpack_from(blob)
    dims = tuple(fields[2:5])
    inside = tuple(fields[5:8])
    C, mode_code, has_center, alpha = fields[8], fields[9], fields[10], fields[11]
    lo, hi, center = fields[12:15], fields[15:18], fields[18:21]
    mode = {v: k for k, v in _MODE_CODES.items()}[mode_code]
    params = ContractionParams(alpha, lo, hi, tuple(center) if has_center else None)
    n = int(np.prod(dims))
    off = _GRID_HEADER.size
    expect = off + 4 * n * (1 + C)
    if len(blob) != expect:
        raise ConfigurationError(f"{path}: size {len(blob)} != expected {expect}")
    op = np.frombuffer(blob, "<f4", n, off).reshape(dims).astype(np.float64)
    sem = None
    if C:
        sem = np.frombuffer(blob, "<f4", n * C, off + 4 * n).reshape(dims + (C,)).astype(np.float64)
    return OccupancyGrid(dims, params, op, sem, mode, inside)


# -- rigs, poses, frame directories ----------------------------------------------

def save_rig(path, rig):
    write_json(path, {"cameras": [c.to_dict() for c in rig]})


def load_rig(path) -> list[CameraModel]:
    return [CameraModel.from_dict(c) for c in read_json(path)["cameras"]]


def save_poses(path, poses):
    write_json(path, {"world_from_ego": [p.matrix().reshape(-1).tolist() for p in poses]})


def load_poses(path) -> list[Pose]:
    return [Pose.from_matrix(np.asarray(m, dtype=np.float64)) for m in read_json(path)["world_from_ego"]]


def frame_stem(f: int, c: int) -> str:
    return f"f{f:03d}_c{c:02d}"


def save_frameset(root, fs: FrameSet, subdir="frames", rig_name="rig.json"):
    root = Path(root)
    (root / subdir).mkdir(parents=True, exist_ok=True)
    save_rig(root / rig_name, fs.rig)
    save_poses(root / "poses.json", fs.poses)
    written = []
    for f in range(fs.num_frames):
        for c in range(fs.num_cameras):
            stem = root / subdir / frame_stem(f, c)
            write_image(f"{stem}.ppm", fs.images[f, c])
            written.append(f"{stem}.ppm")
            if fs.depths is not None:
                write_pfm(f"{stem}_depth.pfm", fs.depths[f, c])
                written.append(f"{stem}_depth.pfm")
            if fs.labels is not None:
                write_label_png(f"{stem}_label.png", fs.labels[f, c])
                written.append(f"{stem}_label.png")
    return written


def load_frameset(root, subdir="frames", rig_name="rig.json") -> FrameSet:
    root = Path(root)
    if not (root / rig_name).exists():
        raise ConfigurationError(f"{root}: missing {rig_name}")
    rig = load_rig(root / rig_name)
    poses = load_poses(root / "poses.json")
    imgs, labs, deps = [], [], []
    for f in range(len(poses)):
        ri, rl, rd = [], [], []
        for c in range(len(rig)):
            stem = root / subdir / frame_stem(f, c)
            ri.append(read_image(f"{stem}.ppm"))
            rl.append(read_label_png(f"{stem}_label.png") if os.path.exists(f"{stem}_label.png") else None)
            rd.append(read_pfm(f"{stem}_depth.pfm") if os.path.exists(f"{stem}_depth.pfm") else None)
        imgs.append(ri)
        labs.append(rl)
        deps.append(rd)
    labels = None if any(x is None for r in labs for x in r) else np.asarray(labs, dtype=np.uint8)
    depths = None if any(x is None for r in deps for x in r) else np.asarray(deps, dtype=np.float64)
    return FrameSet(rig, poses, np.asarray(imgs), labels, depths)
