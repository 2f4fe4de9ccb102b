"""Scene sources: synthetic shape scenes and a COCO-style JSON subset."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .scene_sim import SceneState

MIN_BOX_FRACTION = 1.0 / 36.0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(4, 4, 1)) + rng.uniform(-0.06, 0.06, size=(4, 4, 3))
    img = np.asarray(Image.fromarray((coarse.clip(0, 1) * 255).astype(np.uint8)).resize(
        (size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    yy, xx = np.mgrid[0:size, 0:size]
    freq = rng.uniform(0.2, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(0, np.pi)
    stripes = 0.06 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    img = img + stripes[..., None] + rng.normal(0, 0.02, size=img.shape)
    return img.clip(0, 1)


def _color(rng: np.random.Generator) -> np.ndarray:
    base = np.zeros(3)
    hi = rng.integers(3)
    base[hi] = rng.uniform(0.75, 1.0)
    for c in range(3):
        if c != hi:
            base[c] = rng.uniform(0.0, 0.35)
    return base


def synthetic_scene(rng: np.random.Generator, size: int = 64, max_objects: int = 2,
                    min_side: int = 24, max_side: int = 44) -> SceneState:
    """Colored rectangles and ellipses on a low-saturation textured background."""
    img = _background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    taken = np.zeros((size, size), dtype=bool)
    boxes = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        for _try in range(20):
            w, h = rng.integers(min_side, max_side + 1, size=2)
            x0, y0 = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
            if not taken[y0:y0 + h, x0:x0 + w].any():
                break
        else:
            continue
        taken[max(0, y0 - 2):y0 + h + 2, max(0, x0 - 2):x0 + w + 2] = True
        color = _color(rng)
        if rng.random() < 0.5:
            region = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy = x0 + w / 2.0, y0 + h / 2.0
            region = ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
        shade = 1.0 + 0.15 * (yy - y0) / h - 0.075
        img[region] = (color[None, :] * shade[region][:, None]).clip(0, 1)
        boxes.append((0, x0 / size, y0 / size, w / size, h / size))
    if not boxes:
        return synthetic_scene(rng, size, max_objects, min_side, max_side)
    tensor = torch.from_numpy(img.transpose(2, 0, 1).astype(np.float32)).clamp(0, 1)
    return SceneState(tensor, boxes)


def synthetic_scenes(n: int, seed: int, size: int = 64, **kw) -> list[SceneState]:
    rng = np.random.default_rng(seed)
    return [synthetic_scene(rng, size, **kw) for _ in range(n)]


def blank_scene(size: int = 64, value: float = 0.5) -> torch.Tensor:
    return torch.full((3, size, size), value)


def load_coco_subset(image_dir, annotation_file, resize: int | None = None,
                     min_fraction: float = MIN_BOX_FRACTION) -> list[SceneState]:
    """Load scenes from ``images[]``/``annotations[]`` JSON.

    Crowd boxes and boxes smaller than ``min_fraction`` of the image area are
    dropped; images left without boxes are skipped.
    """
    meta = json.loads(Path(annotation_file).read_text())
    by_image: dict[int, list] = {}
    for ann in meta.get("annotations", []):
        by_image.setdefault(ann["image_id"], []).append(ann)
    scenes = []
    for info in meta.get("images", []):
        w_img, h_img = float(info["width"]), float(info["height"])
        boxes = []
        for ann in by_image.get(info["id"], []):
            if ann.get("iscrowd", 0):
                continue
            x, y, w, h = ann["bbox"]
            if w * h < min_fraction * w_img * h_img:
                continue
            x0, y0 = max(0.0, x), max(0.0, y)
            x1, y1 = min(w_img, x + w), min(h_img, y + h)
            boxes.append((int(ann["category_id"]), x0 / w_img, y0 / h_img, (x1 - x0) / w_img, (y1 - y0) / h_img))
        if not boxes:
            continue
        pil = Image.open(Path(image_dir) / info["file_name"]).convert("RGB")
        if resize:
            pil = pil.resize((resize, resize), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float32) / 255.0
        scenes.append(SceneState(torch.from_numpy(arr.transpose(2, 0, 1).copy()), boxes))
    return scenes


def dataset_hash(scenes: list[SceneState]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.image.numpy().tobytes())
        h.update(repr(s.boxes).encode())
    return h.hexdigest()[:16]
