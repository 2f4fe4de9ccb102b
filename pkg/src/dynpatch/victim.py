"""Victim detectors: the adapter contract, a toy detector and post-processing."""
from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .objectives import box_iou


class DetectorInputError(ValueError):
    pass


class TrainingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    confidence: float
    class_id: int = 0


class DetectorInterface(abc.ABC):
    """Contract every victim follows.

    ``predict`` returns dense, differentiable ``(conf, boxes)`` tensors shaped
    ``(B, N)`` and ``(B, N, 4)`` with xywh boxes in normalised coordinates.
    ``detect`` returns post-NMS :class:`Detection` objects for one image.
    """

    name: str = "detector"
    input_size: tuple[int, int] = (64, 64)
    differentiable: bool = True

    @abc.abstractmethod
    def predict(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        ...

    def check_input(self, images: torch.Tensor) -> None:
        if tuple(images.shape[-2:]) != tuple(self.input_size) or images.shape[-3] != 3:
            raise DetectorInputError(
                f"{self.name} expects (3, {self.input_size[0]}, {self.input_size[1]}) input, got {tuple(images.shape)}")

    def detect(self, image: torch.Tensor, conf_floor: float = 1e-3, nms_iou: float = 0.5) -> list[Detection]:
        batch = image[None] if image.ndim == 3 else image
        self.check_input(batch)
        conf, boxes = self.predict(batch)
        return nms_detections(conf[0].detach(), boxes[0].detach(), conf_floor, nms_iou)


def nms_detections(conf: torch.Tensor, boxes: torch.Tensor, conf_floor: float = 1e-3,
                   nms_iou: float = 0.5) -> list[Detection]:
    """Greedy NMS; ties in confidence keep the lower index first."""
    keep_mask = conf >= conf_floor
    idx = torch.nonzero(keep_mask).flatten()
    if idx.numel() == 0:
        return []
    c = conf[idx]
    order = sorted(range(len(idx)), key=lambda k: (-float(c[k]), int(idx[k])))
    idx = idx[order]
    b = boxes[idx]
    ious = box_iou(b, b)
    alive = torch.ones(len(idx), dtype=torch.bool)
    out = []
    for k in range(len(idx)):
        if not alive[k]:
            continue
        alive &= ~(ious[k] > nms_iou)
        bx = b[k].clamp(0.0, 1.0)
        x0, y0 = float(bx[0]), float(bx[1])
        x1 = min(1.0, float(b[k, 0] + b[k, 2]))
        y1 = min(1.0, float(b[k, 1] + b[k, 3]))
        out.append(Detection((x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0)), float(conf[idx[k]])))
    return out


def postprocess_filter(dets: list[Detection], targets, conf_min: float) -> list[Detection]:
    """Keep detections at or above ``conf_min`` that overlap an attacked box."""
    if not dets or len(targets) == 0:
        return []
    t = torch.as_tensor(np.asarray(targets, dtype=np.float64).reshape(-1, 4))
    b = torch.as_tensor(np.asarray([d.box for d in dets], dtype=np.float64))
    overlap = (box_iou(b, t) > 0).any(dim=1)
    return [d for d, o in zip(dets, overlap.tolist()) if o and d.confidence >= conf_min]


# ---------------------------------------------------------------------------
# toy detector


def _block(c_in, c_out, stride, dilation=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride, dilation, dilation=dilation, bias=False),
                         nn.BatchNorm2d(c_out), nn.SiLU())


class ToyDetector(nn.Module, DetectorInterface):
    """Six conv blocks plus a 1x1 head, predicting one box per grid cell."""

    name = "toy-grid"

    def __init__(self, image_size: int = 64, width: int = 16, box_prior: float = 0.4, context_dilation: int = 2):
        super().__init__()
        self.input_size = (image_size, image_size)
        self.box_prior = box_prior
        self.context_dilation = context_dilation
        w = width
        self.body = nn.Sequential(
            _block(3, w, 1), _block(w, 2 * w, 2), _block(2 * w, 2 * w, 1),
            _block(2 * w, 4 * w, 2), _block(4 * w, 4 * w, 2),
            # context block at stride 8: the receptive field is 21 + 16 * dilation pixels
            _block(4 * w, 4 * w, 1, dilation=context_dilation),
        )
        self.head = nn.Conv2d(4 * w, 5, 1)
        self.grid = image_size // 8

    def raw(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(images)).permute(0, 2, 3, 1)

    def decode(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, g = raw.shape[0], raw.shape[1]
        jj, ii = torch.meshgrid(torch.arange(g, dtype=raw.dtype), torch.arange(g, dtype=raw.dtype), indexing="xy")
        cx = (jj + torch.sigmoid(raw[..., 1])) / g
        cy = (ii + torch.sigmoid(raw[..., 2])) / g
        w = self.box_prior * torch.exp(raw[..., 3].clamp(-4, 4))
        h = self.box_prior * torch.exp(raw[..., 4].clamp(-4, 4))
        boxes = torch.stack([cx - w / 2, cy - h / 2, w, h], dim=-1).reshape(b, -1, 4)
        return torch.sigmoid(raw[..., 0]).reshape(b, -1), boxes

    def predict(self, images):
        self.check_input(images)
        return self.decode(self.raw(images))

    def forward(self, images):
        return self.predict(images)


def freeze(model: nn.Module) -> nn.Module:
    """Inference statistics for normalisation layers and no parameter grads."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _targets(boxes_list, g: int, prior: float):
    obj = torch.zeros(len(boxes_list), g, g)
    reg = torch.zeros(len(boxes_list), g, g, 4)
    for n, boxes in enumerate(boxes_list):
        for _, x, y, w, h in boxes:
            cx, cy = x + w / 2, y + h / 2
            j, i = min(int(cx * g), g - 1), min(int(cy * g), g - 1)
            obj[n, i, j] = 1.0
            reg[n, i, j] = torch.tensor([cx * g - j, cy * g - i, math.log(w / prior), math.log(h / prior)])
    return obj, reg


def _occlude(images: torch.Tensor, scenes, rng: np.random.Generator, p: float = 0.5) -> torch.Tensor:
    """Paste small uniform-noise squares on objects so random patches stay weak."""
    out = images.clone()
    size = images.shape[-1]
    for n, s in enumerate(scenes):
        if rng.random() >= p:
            continue
        _, x, y, w, h = s.boxes[int(rng.integers(len(s.boxes)))]
        side = max(2, int(round(math.sqrt(rng.uniform(0.03, 0.07) * w * h) * size)))
        cx = int((x + w * rng.uniform(0.3, 0.7)) * size)
        cy = int((y + h * rng.uniform(0.3, 0.7)) * size)
        x0, y0 = max(0, cx - side // 2), max(0, cy - side // 2)
        patch = torch.from_numpy(rng.uniform(0, 1, size=(3, side, side)).astype(np.float32))
        region = out[n, :, y0:y0 + side, x0:x0 + side]
        region.copy_(patch[:, :region.shape[1], :region.shape[2]])
    return out


def fit_detector(model: ToyDetector, scenes, epochs: int, seed: int, batch_size: int = 32,
                 lr: float = 3e-3, occlusion: float = 0.02) -> ToyDetector:
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps = max(1, math.ceil(len(scenes) / batch_size)) * max(epochs, 1)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    images = torch.stack([s.image for s in scenes])
    model.train()
    for _ in range(epochs):
        perm = rng.permutation(len(scenes))
        for k in range(0, len(scenes), batch_size):
            idx = perm[k:k + batch_size]
            batch = [scenes[i] for i in idx]
            x = _occlude(images[idx], batch, rng, occlusion)
            boxes = [s.boxes for s in batch]
            if rng.random() < 0.5:
                x = x.flip(-1)
                boxes = [[(c, 1 - bx - bw, by, bw, bh) for c, bx, by, bw, bh in b] for b in boxes]
            obj, reg = _targets(boxes, model.grid, model.box_prior)
            raw = model.raw(x)
            pos = obj > 0
            loss_obj = F.binary_cross_entropy_with_logits(raw[..., 0], obj, pos_weight=torch.tensor(4.0))
            loss_xy = F.binary_cross_entropy_with_logits(raw[..., 1:3][pos], reg[..., :2][pos])
            loss_wh = F.smooth_l1_loss(raw[..., 3:5][pos], reg[..., 2:][pos])
            loss = loss_obj + loss_xy + 2.0 * loss_wh
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    return freeze(model)


def clean_ap50(model: DetectorInterface, scenes) -> float:
    from .evaluator import average_precision

    dets, gts = [], []
    with torch.no_grad():
        for n, s in enumerate(scenes):
            for d in model.detect(s.image):
                if d.confidence >= 0.5:
                    dets.append((d.confidence, d.box, n))
            gts.extend((b[1:], n) for b in s.boxes)
    return average_precision(dets, gts, iou_thresh=0.5, conf_min=0.5)


def train_toy_detector(scenes, epochs: int, rng_seed: int, holdout=None, image_size: int = 64,
                       width: int = 16, min_ap: float = 0.80, context_dilation: int = 2, **kw) -> ToyDetector:
    """Fit the toy detector; raise :class:`TrainingFailure` below ``min_ap`` held-out AP50."""
    if not scenes:
        raise ValueError("empty detector training set")
    torch.manual_seed(rng_seed)
    model = ToyDetector(image_size, width, context_dilation=context_dilation)
    fit_detector(model, scenes, epochs, rng_seed, **kw)
    if holdout is not None and epochs > 0:
        ap = clean_ap50(model, holdout)
        model.holdout_ap50 = ap
        if ap < min_ap:
            raise TrainingFailure(f"toy detector reached held-out AP50 {ap:.3f} < {min_ap}")
    return model


def check_conformance(detector: DetectorInterface, image_size=None) -> None:
    """Adapter conformance checks; raises ``AssertionError`` on violation."""
    h, w = image_size or detector.input_size
    x = torch.rand(2, 3, h, w, requires_grad=detector.differentiable)
    conf, boxes = detector.predict(x)
    assert conf.ndim == 2 and conf.shape[0] == 2, "conf must be (B, N)"
    assert boxes.shape == (*conf.shape, 4), "boxes must be (B, N, 4)"
    assert bool(((conf >= 0) & (conf <= 1)).all()), "confidences must lie in [0, 1]"
    conf2, _ = detector.predict(x)
    assert torch.equal(conf, conf2), "predict must be deterministic"
    if detector.differentiable:
        conf.max().backward()
        assert x.grad is not None and bool(torch.isfinite(x.grad).all()), "no finite input gradient"
    dets = detector.detect(x[0].detach())
    assert all(isinstance(d, Detection) and 0 <= d.confidence <= 1 for d in dets)
    try:
        detector.predict(torch.rand(1, 3, h + 1, w + 1))
    except DetectorInputError:
        pass
    else:
        raise AssertionError("size mismatch must raise DetectorInputError")


def save_detector(model: ToyDetector, path) -> None:
    torch.save({"format": "dynpatch-detector/2", "image_size": model.input_size[0],
                "width": model.body[0][0].out_channels, "context_dilation": model.context_dilation, "state_dict": model.state_dict(),
                "holdout_ap50": getattr(model, "holdout_ap50", None)}, path)


def load_detector(path) -> ToyDetector:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "dynpatch-detector/2":
        raise ValueError(f"unsupported detector checkpoint format {blob.get('format')!r}")
    model = ToyDetector(blob["image_size"], blob["width"], context_dilation=blob["context_dilation"])
    model.load_state_dict(blob["state_dict"])
    model.holdout_ap50 = blob.get("holdout_ap50")
    return freeze(model)
