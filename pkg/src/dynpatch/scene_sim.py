"""Dynamic attack scene simulation.

Patch placement, colour distortion and construction of the attacker's
observation. Images are float tensors laid out ``(3, H, W)`` with values in
``[0, 1]``; boxes are ``(class_id, x, y, w, h)`` in normalised image
coordinates with ``(x, y)`` the top-left corner.

Placements are stored as a 3x3 matrix mapping normalised patch coordinates
``(u, v) in [-1, 1]^2`` to image pixel coordinates, where pixel ``(i, j)`` has
its centre at ``(j + 0.5, i + 0.5)``. This is the same convention that
``torch.nn.functional.grid_sample`` uses with ``align_corners=False``, so a
warp is one inverse mapping followed by one bilinear lookup.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "SceneState", "ColorParams", "TransformParams", "TransformPreset",
    "Observation", "PRESETS", "NoTargetError", "InvalidTransformError",
    "AugmentationError", "sample_theta", "apply_patch", "apply_patch_batch",
    "color_distort", "build_observation", "placement_matrix",
    "render_mask", "sample_randaug", "apply_randaug", "RandAugOps",
]

COLOR_LIMITS = {"brightness": 0.05, "saturation": 0.1, "contrast": 0.1, "noise_std": 0.02}
LAS_VEGAS_RETRIES = 16
LOCAL_MARGIN = 0.25


class NoTargetError(ValueError):
    """The scene holds no box to anchor a patch to."""


class InvalidTransformError(ValueError):
    pass


class AugmentationError(RuntimeError):
    """Observation augmentation kept producing an empty mask."""


@dataclass
class SceneState:
    image: torch.Tensor
    boxes: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {tuple(self.image.shape)}")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values outside [0, 1]: [{lo}, {hi}]")
        boxes = []
        for b in self.boxes:
            cls, x, y, w, h = b
            if not (0 <= x <= 1 and 0 <= y <= 1 and 0 <= x + w <= 1 + 1e-9 and 0 <= y + h <= 1 + 1e-9):
                raise ValueError(f"box outside the image: {b}")
            boxes.append((int(cls), float(x), float(y), float(w), float(h)))
        self.boxes = boxes

    @property
    def size(self) -> tuple[int, int]:
        return int(self.image.shape[1]), int(self.image.shape[2])

    def box_pixels(self, index: int) -> tuple[float, float, float, float]:
        """Box ``index`` as ``(x, y, w, h)`` in pixels."""
        h_img, w_img = self.size
        _, x, y, w, h = self.boxes[index]
        return x * w_img, y * h_img, w * w_img, h * h_img


@dataclass(frozen=True)
class ColorParams:
    brightness: float = 0.0
    saturation: float = 0.0
    contrast: float = 0.0
    noise_std: float = 0.0

    def clamped(self) -> "ColorParams":
        lim = COLOR_LIMITS
        return ColorParams(
            float(np.clip(self.brightness, -lim["brightness"], lim["brightness"])),
            float(np.clip(self.saturation, -lim["saturation"], lim["saturation"])),
            float(np.clip(self.contrast, -lim["contrast"], lim["contrast"])),
            float(np.clip(self.noise_std, 0.0, lim["noise_std"])),
        )


@dataclass
class TransformParams:
    """One sampled patch injection.

    ``matrix`` maps normalised patch coordinates to image pixels. For presets
    without 3D rotation its last row is ``(0, 0, 1)`` and :attr:`affine` is
    the usual 2x3 form.
    """

    matrix: np.ndarray
    mask: torch.Tensor
    color: ColorParams = ColorParams()
    target_box: int = 0
    noise_seed: int = 0
    position: tuple[float, float] = (0.5, 0.5)
    size: float = 0.0
    rotation: float = 0.0
    rotation3d: float = 0.0

    @property
    def affine(self) -> np.ndarray:
        return self.matrix[:2]

    def check(self) -> None:
        if not bool(((self.mask == 0) | (self.mask == 1)).all()):
            raise InvalidTransformError("mask is not binary")
        if float(self.mask.sum()) <= 0:
            raise InvalidTransformError("mask has zero area")
        if self.color.noise_std < 0:
            raise InvalidTransformError("negative noise std")
        _check_matrix(self.matrix)


def _check_matrix(matrix: np.ndarray) -> None:
    det = float(np.linalg.det(matrix))
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise InvalidTransformError(f"placement matrix is not invertible (det={det:g})")


@dataclass(frozen=True)
class TransformPreset:
    name: str
    position: tuple[float, float]
    size: tuple[float, float]
    rotation: tuple[float, float]
    rotation3d: tuple[float, float]

    def __post_init__(self):
        for key in ("position", "size", "rotation", "rotation3d"):
            lo, hi = getattr(self, key)
            if lo > hi:
                raise ValueError(f"preset {self.name}: {key} range has lo > hi")


# Relative position inside the target box, patch area as a fraction of the
# box area, in-plane rotation and out-of-plane tilt in degrees.
PRESETS = {
    "Zero": TransformPreset("Zero", (0.5, 0.5), (0.05, 0.05), (0.0, 0.0), (0.0, 0.0)),
    "Base": TransformPreset("Base", (0.4, 0.6), (0.04, 0.06), (-9.0, 9.0), (0.0, 0.0)),
    "S+": TransformPreset("S+", (0.4, 0.6), (0.03, 0.07), (-9.0, 9.0), (0.0, 0.0)),
    "P+": TransformPreset("P+", (0.3, 0.7), (0.04, 0.06), (-9.0, 9.0), (0.0, 0.0)),
    "AF": TransformPreset("AF", (0.4, 0.6), (0.04, 0.06), (-9.0, 9.0), (-30.0, 30.0)),
}


@dataclass
class Observation:
    local: torch.Tensor
    global_: torch.Tensor
    mask: torch.Tensor
    attempts: int = 1

    def __post_init__(self):
        if self.mask.ndim == 2:
            self.mask = self.mask.unsqueeze(0)


# ---------------------------------------------------------------------------
# geometry


def placement_matrix(center, side, rotation=0.0, rotation3d=0.0, focal=None) -> np.ndarray:
    """Matrix placing a square patch of ``side`` pixels centred at ``center``.

    ``rotation3d`` tilts the patch plane about its vertical axis and projects
    it through a pinhole camera whose focal length is ``focal`` pixels; the
    patch sits at the depth where its untilted image is ``side`` pixels wide.
    ``focal=None`` is the orthographic limit.
    """
    cx, cy = center
    r = math.radians(rotation)
    t = math.radians(rotation3d)
    k = 0.0 if focal is None else (side / 2.0) / float(focal)
    trans = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    rot = np.array([[math.cos(r), -math.sin(r), 0.0], [math.sin(r), math.cos(r), 0.0], [0.0, 0.0, 1.0]])
    scale = np.diag([side / 2.0, side / 2.0, 1.0])
    tilt = np.array([[math.cos(t), 0.0, 0.0], [0.0, 1.0, 0.0], [k * math.sin(t), 0.0, 1.0]])
    return trans @ rot @ scale @ tilt


@functools.lru_cache(maxsize=8)
def _pixel_centers(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    pts.flags.writeable = False
    return pts


def _inverse_grid(matrices: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch coordinates seen by every output pixel, plus the in-patch flag."""
    inv = np.linalg.inv(matrices)
    pts = _pixel_centers(h, w)
    q = pts[None] @ inv[:, None].swapaxes(-1, -2)
    denom = q[..., 2]
    safe = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    uv = q[..., :2] / safe[..., None]
    inside = (denom > 0) & (np.abs(uv[..., 0]) <= 1.0) & (np.abs(uv[..., 1]) <= 1.0)
    uv = np.where(inside[..., None], uv, 2.0)
    return uv, inside


def render_mask(matrix: np.ndarray, image_size: tuple[int, int]) -> torch.Tensor:
    _, inside = _inverse_grid(matrix[None], *image_size)
    return torch.from_numpy(inside[0].astype(np.float32))


# ---------------------------------------------------------------------------
# sampling


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(np.clip(rng.uniform(lo, hi), lo, hi))


def sample_color(rng: np.random.Generator) -> ColorParams:
    lim = COLOR_LIMITS
    return ColorParams(
        brightness=_uniform(rng, (-lim["brightness"], lim["brightness"])),
        saturation=_uniform(rng, (-lim["saturation"], lim["saturation"])),
        contrast=_uniform(rng, (-lim["contrast"], lim["contrast"])),
        noise_std=_uniform(rng, (0.0, lim["noise_std"])),
    )


def sample_theta(scene: SceneState, preset: TransformPreset | str, rng_seed: int,
                 target: int | None = None) -> TransformParams:
    """Draw a patch placement anchored to one of the scene's boxes."""
    if isinstance(preset, str):
        preset = PRESETS[preset]
    if not scene.boxes:
        raise NoTargetError("scene has no boxes to attack")
    rng = np.random.default_rng(rng_seed)
    index = int(rng.integers(len(scene.boxes))) if target is None else int(target)
    px = _uniform(rng, preset.position)
    py = _uniform(rng, preset.position)
    size = _uniform(rng, preset.size)
    rotation = _uniform(rng, preset.rotation)
    rotation3d = _uniform(rng, preset.rotation3d)
    color = sample_color(rng)
    noise_seed = int(rng.integers(2**31 - 1))

    bx, by, bw, bh = scene.box_pixels(index)
    side = math.sqrt(size * bw * bh)
    # focal ratio 1: the focal length equals the image width
    matrix = placement_matrix((bx + px * bw, by + py * bh), side, rotation, rotation3d,
                              focal=scene.size[1])
    params = TransformParams(
        matrix=matrix, mask=render_mask(matrix, scene.size), color=color,
        target_box=index, noise_seed=noise_seed, position=(px, py), size=size,
        rotation=rotation, rotation3d=rotation3d,
    )
    params.check()
    return params


# ---------------------------------------------------------------------------
# colour


def _gray(x: torch.Tensor) -> torch.Tensor:
    return 0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]


def _color_batch(x, brightness, saturation, contrast, noise_std, seeds, mask=None):
    """Brightness shift, saturation and contrast scaling, additive noise."""
    b = x.shape[0]
    view = (b, 1, 1, 1)
    x = x + brightness.view(view)
    gray = _gray(x)
    x = gray + (1.0 + saturation.view(view)) * (x - gray)
    gray = _gray(x)
    if mask is None:
        mean = gray.mean(dim=(1, 2, 3), keepdim=True)
    else:
        m = mask.unsqueeze(1)
        mean = (gray * m).sum(dim=(1, 2, 3), keepdim=True) / m.sum(dim=(1, 2, 3), keepdim=True).clamp_min(1.0)
    x = mean + (1.0 + contrast.view(view)) * (x - mean)
    if bool((noise_std > 0).any()):
        noise = torch.stack([
            torch.randn(x.shape[1:], generator=torch.Generator().manual_seed(int(s)), dtype=x.dtype)
            for s in seeds
        ])
        x = x + noise * noise_std.view(view)
    return x.clamp(0.0, 1.0)


def color_distort(image: torch.Tensor, params: ColorParams, rng_seed: int,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Apply the colour distortion to one ``(3, H, W)`` image.

    With ``mask`` the contrast pivot is the mean grey level under the mask.
    Parameters are clamped to their documented ranges first.
    """
    p = params.clamped()
    t = lambda v: torch.tensor([v], dtype=image.dtype)  # noqa: E731
    out = _color_batch(image.unsqueeze(0), t(p.brightness), t(p.saturation), t(p.contrast),
                       t(p.noise_std), [rng_seed], None if mask is None else mask.unsqueeze(0))
    return out[0]


# ---------------------------------------------------------------------------
# injection


def footprint(matrix: np.ndarray) -> float:
    """Approximate on-screen side length, in pixels, of a placed patch."""
    return 2.0 * math.sqrt(abs(np.linalg.det(np.asarray(matrix)[:2, :2])))


def prefilter_patches(patches: torch.Tensor, matrices: np.ndarray) -> torch.Tensor:
    """Low-pass each patch to its on-screen resolution (a one-level mipmap).

    The patch is area-resampled to roughly its footprint and bilinearly
    brought back to ``S x S``, so sampling a small placement does not alias
    and every texel receives gradient.
    """
    s = patches.shape[-1]
    rows = []
    for p, m in zip(patches, matrices):
        k = int(min(s, max(2, math.ceil(footprint(m)))))
        if k >= s:
            rows.append(p)
            continue
        low = F.interpolate(p[None], size=(k, k), mode="bilinear", antialias=True, align_corners=False)
        rows.append(F.interpolate(low, size=(s, s), mode="bilinear", align_corners=False)[0])
    return torch.stack(rows)


def warp_patches(patches: torch.Tensor, matrices: np.ndarray, image_size,
                 prefilter: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear warp of ``(B, 3, S, S)`` patches onto image canvases."""
    for m in matrices:
        _check_matrix(m)
    if prefilter:
        patches = prefilter_patches(patches, matrices)
    uv, inside = _inverse_grid(matrices, *image_size)
    grid = torch.from_numpy(uv.astype(np.float32)).to(patches.dtype)
    warped = F.grid_sample(patches, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return warped, torch.from_numpy(inside.astype(np.float32)).to(patches.dtype)


def apply_patch_batch(images: torch.Tensor, patches: torch.Tensor, params: list[TransformParams],
                      color: bool = True, prefilter: bool = True) -> torch.Tensor:
    """Batched patch injection; differentiable with respect to ``patches``."""
    matrices = np.stack([p.matrix for p in params])
    warped, _ = warp_patches(patches, matrices, images.shape[-2:], prefilter=prefilter)
    mask = torch.stack([p.mask for p in params]).to(images.dtype)
    if color:
        cp = [p.color.clamped() for p in params]
        vec = lambda k: torch.tensor([getattr(c, k) for c in cp], dtype=images.dtype)  # noqa: E731
        warped = _color_batch(warped, vec("brightness"), vec("saturation"), vec("contrast"),
                              vec("noise_std"), [p.noise_seed for p in params], mask)
    m = mask.unsqueeze(1)
    return (images * (1.0 - m) + warped * m).clamp(0.0, 1.0)


def apply_patch(scene: SceneState, patch: torch.Tensor, params: TransformParams) -> SceneState:
    """Paste ``patch`` into the scene: ``X * (1 - m) + warp(patch) * m``.

    Colour distortion then acts on the patched region only. Gradients flow
    back to ``patch`` through the bilinear warp.
    """
    _check_matrix(params.matrix)
    out = apply_patch_batch(scene.image.unsqueeze(0), patch.unsqueeze(0), [params])[0]
    state = SceneState.__new__(SceneState)
    state.image, state.boxes = out, list(scene.boxes)
    return state


# ---------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class RandAugOps:
    """Reduced RandAugment draw. Geometry is shared by image and mask."""

    translate: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    rotate: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0

    def matrix(self, image_size) -> np.ndarray:
        h, w = image_size
        cx, cy = w / 2.0, h / 2.0
        r = math.radians(self.rotate)
        c, s = math.cos(r) * self.scale, math.sin(r) * self.scale
        lin = np.array([[c, -s], [s, c]])
        out = np.eye(3)
        out[:2, :2] = lin
        shift = np.array([cx + self.translate[0] * w, cy + self.translate[1] * h])
        out[:2, 2] = shift - lin @ np.array([cx, cy])
        return out


RANDAUG_OPS = ("translate", "scale", "rotate", "brightness", "contrast")


def sample_randaug(rng_seed, n_ops: int = 2) -> RandAugOps:
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(RANDAUG_OPS), size=n_ops, replace=False)
    kw = {}
    for i in sorted(int(c) for c in chosen):
        name = RANDAUG_OPS[i]
        if name == "translate":
            kw[name] = (float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1)))
        elif name == "scale":
            kw[name] = float(rng.uniform(0.9, 1.1))
        elif name == "rotate":
            kw[name] = float(rng.uniform(-10.0, 10.0))
        elif name == "brightness":
            kw[name] = float(rng.uniform(-0.1, 0.1))
        else:
            kw[name] = float(rng.uniform(0.8, 1.2))
    return RandAugOps(**kw)


def apply_randaug(image: torch.Tensor, mask: torch.Tensor, ops: RandAugOps) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp image and mask with the same geometry; photometry hits the image only."""
    h, w = image.shape[-2:]
    fwd = ops.matrix((h, w))
    inv = np.linalg.inv(fwd)
    pts = _pixel_centers(h, w) @ inv.T
    src = pts[..., :2] / pts[..., 2:3]
    grid = np.stack([src[..., 0] / w * 2.0 - 1.0, src[..., 1] / h * 2.0 - 1.0], axis=-1)
    grid = torch.from_numpy(grid.astype(np.float32))[None].to(image.dtype)
    both = torch.cat([image, mask.unsqueeze(0).to(image.dtype)], dim=0).unsqueeze(0)
    out = F.grid_sample(both, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    img, m = out[:3], (out[3] >= 0.5).to(image.dtype)
    img = img + ops.brightness
    mean = img.mean()
    img = (mean + ops.contrast * (img - mean)).clamp(0.0, 1.0)
    return img, m


def local_crop(image: torch.Tensor, mask: torch.Tensor, size: int, margin: float = LOCAL_MARGIN) -> torch.Tensor:
    """Crop around the mask's bounding box, dilated by ``margin`` per side."""
    h, w = image.shape[-2:]
    rows = torch.nonzero(mask.sum(dim=1) > 0).flatten()
    cols = torch.nonzero(mask.sum(dim=0) > 0).flatten()
    y0, y1 = float(rows[0]), float(rows[-1]) + 1.0
    x0, x1 = float(cols[0]), float(cols[-1]) + 1.0
    dx, dy = (x1 - x0) * margin, (y1 - y0) * margin
    x0, x1, y0, y1 = x0 - dx, x1 + dx, y0 - dy, y1 + dy
    t = (np.arange(size) + 0.5) / size
    xs = (x0 + t * (x1 - x0)) / w * 2.0 - 1.0
    ys = (y0 + t * (y1 - y0)) / h * 2.0 - 1.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1).astype(np.float32))[None].to(image.dtype)
    return F.grid_sample(image.unsqueeze(0), grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def build_observation(scene: SceneState, params: TransformParams, rng_seed: int,
                      augment: bool = True, local_size: int = 256) -> Observation:
    """Attacker's view ``[local crop; augmented global; augmented mask]``.

    Augmentation is rerun with a fresh sub-seed while the augmented mask is
    empty, at most ``LAS_VEGAS_RETRIES`` times.
    """
    mask = params.mask
    if float(mask.sum()) <= 0:
        raise InvalidTransformError("observation needs a nonempty placement mask")
    local = local_crop(scene.image, mask, local_size)
    if not augment:
        return Observation(local, scene.image.clone(), mask.clone(), attempts=0)
    for attempt in range(LAS_VEGAS_RETRIES):
        sub = np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFF, attempt])
        ops = sample_randaug(sub)
        g, m = apply_randaug(scene.image, mask, ops)
        if float(m.sum()) > 0:
            return Observation(local, g, m, attempts=attempt + 1)
    raise AugmentationError(f"augmented mask empty after {LAS_VEGAS_RETRIES} attempts")
