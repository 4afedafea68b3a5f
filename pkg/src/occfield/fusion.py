"""Per-pixel category labels from open-vocabulary detection masks.

Each detection carries a binary mask, the detector's confidence logit and the
text phrase that prompted it.  A pixel takes the category of the detection
with the highest ``logit * mask`` score; pixels covered by no mask are
labelled uncertain (255).
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidParameterError

UNCERTAIN = 255


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    phrases: tuple


class PromptTable:
    def __init__(self, categories):
        self.categories = [Category(int(c.id), str(c.name), tuple(c.phrases)) for c in categories]
        ids = [c.id for c in self.categories]
        if ids != list(range(len(ids))):
            raise ConfigurationError("category ids must be dense 0..C-1 in order")
        self._lookup = {}
        for c in self.categories:
            if not c.phrases:
                raise ConfigurationError(f"category {c.name!r} has no phrases")
            for p in c.phrases:
                key = p.strip().lower()
                if key in self._lookup:
                    other = self.categories[self._lookup[key]].name
                    raise ConfigurationError(f"phrase {p!r} maps to both {other!r} and {c.name!r}")
                self._lookup[key] = c.id

    def __len__(self) -> int:
        return len(self.categories)

    def __contains__(self, phrase: str) -> bool:
        return phrase.strip().lower() in self._lookup

    def category_id(self, phrase: str) -> int:
        try:
            return self._lookup[phrase.strip().lower()]
        except KeyError:
            raise ConfigurationError(f"phrase {phrase!r} is not in the prompt table") from None

    def category_name(self, phrase: str) -> str:
        return self.categories[self.category_id(phrase)].name

    def names(self) -> dict:
        return {c.id: c.name for c in self.categories}

    def to_list(self) -> list:
        return [{"id": c.id, "name": c.name, "phrases": list(c.phrases)} for c in self.categories]


def load_prompt_table(path=None) -> PromptTable:
    """Load a ``[{id, name, phrases}]`` table; ``None`` loads the bundled one."""
    if path is None:
        text = resources.files("occfield").joinpath("data/prompt_table.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        rows = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"prompt table is not valid JSON: {e}") from None
    if not isinstance(rows, list):
        raise ConfigurationError("prompt table must be a JSON list")
    cats = []
    for r in rows:
        if not isinstance(r, dict) or not {"id", "name", "phrases"} <= set(r):
            raise ConfigurationError(f"bad prompt table row {r!r}")
        if not isinstance(r["phrases"], list):
            raise ConfigurationError(f"phrases of {r['name']!r} must be a list")
        cats.append(Category(r["id"], r["name"], tuple(r["phrases"])))
    return PromptTable(cats)


@dataclass
class Detection:
    mask: np.ndarray
    logit: float
    phrase: str


@dataclass
class DetectionMaskSet:
    image_id: str
    height: int
    width: int
    entries: list
    thresholds: dict | None = None

    def __post_init__(self):
        for i, e in enumerate(self.entries):
            m = np.asarray(e.mask, dtype=bool)
            if m.shape != (self.height, self.width):
                raise InvalidParameterError(
                    f"mask {i} of {self.image_id!r} has shape {m.shape}, expected {(self.height, self.width)}")
            if not 0.0 < float(e.logit) <= 1.0:
                raise InvalidParameterError(f"logit of mask {i} must lie in (0, 1]")
            e.mask = m


def load_mask_set(manifest_path, table: PromptTable | None = None) -> DetectionMaskSet:
    """Read a JSON manifest whose entries point at 1-bit PNG masks.

    With ``table`` every phrase is resolved immediately, so unknown phrases
    fail at load time.
    """
    from .io import read_json, read_mask_png

    manifest_path = Path(manifest_path)
    m = read_json(manifest_path)
    for k in ("image_id", "height", "width", "entries"):
        if k not in m:
            raise ConfigurationError(f"{manifest_path}: missing {k!r}")
    entries = []
    for e in m["entries"]:
        if table is not None:
            table.category_id(e["phrase"])
        mask = read_mask_png(manifest_path.parent / e["mask_path"])
        entries.append(Detection(mask, float(e["logit"]), e["phrase"]))
    return DetectionMaskSet(str(m["image_id"]), int(m["height"]), int(m["width"]), entries,
                            m.get("thresholds"))


def save_mask_set(manifest_path, masks: DetectionMaskSet):
    from .io import write_json, write_mask_png

    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, e in enumerate(masks.entries):
        name = f"{masks.image_id}_mask{i:03d}.png"
        write_mask_png(manifest_path.parent / name, e.mask)
        rows.append({"mask_path": name, "logit": float(e.logit), "phrase": e.phrase})
    doc = {"image_id": masks.image_id, "height": masks.height, "width": masks.width, "entries": rows}
    if masks.thresholds is not None:
        doc["thresholds"] = masks.thresholds
    write_json(manifest_path, doc)


def fuse_labels(masks: DetectionMaskSet, table: PromptTable) -> np.ndarray:
    """Label map (uint8); ties go to the lowest detection index."""
    H, W = masks.height, masks.width
    if not masks.entries:
        return np.full((H, W), UNCERTAIN, dtype=np.uint8)
    cats = np.array([table.category_id(e.phrase) for e in masks.entries], dtype=np.uint8)
    scores = np.stack([e.logit * e.mask for e in masks.entries]).astype(np.float64)
    best = np.argmax(scores, axis=0)
    covered = np.take_along_axis(scores, best[None], 0)[0] > 0.0
    return np.where(covered, cats[best], UNCERTAIN).astype(np.uint8)


def label_palette(table: PromptTable) -> dict:
    """Fixed id -> {name, rgb} colors for label PNGs; 255 is black."""
    out = {}
    for c in table.categories:
        r, g, b = colorsys.hsv_to_rgb((c.id * 0.618033988749895) % 1.0, 0.65, 0.95)
        out[c.id] = {"name": c.name, "rgb": [round(r * 255), round(g * 255), round(b * 255)]}
    out[UNCERTAIN] = {"name": "uncertain", "rgb": [0, 0, 0]}
    return out
