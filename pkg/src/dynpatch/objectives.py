"""Loss terms and their composition."""
from __future__ import annotations

from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

IOU_SELECT = 0.3
SMOOTH_MAX_TEMPERATURE = 30.0


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between ``(..., N, 4)`` and ``(..., M, 4)`` xywh boxes."""
    ax0, ay0 = a[..., 0], a[..., 1]
    ax1, ay1 = ax0 + a[..., 2], ay0 + a[..., 3]
    bx0, by0 = b[..., 0], b[..., 1]
    bx1, by1 = bx0 + b[..., 2], by0 + b[..., 3]
    iw = (torch.minimum(ax1[..., :, None], bx1[..., None, :]) - torch.maximum(ax0[..., :, None], bx0[..., None, :])).clamp_min(0)
    ih = (torch.minimum(ay1[..., :, None], by1[..., None, :]) - torch.maximum(ay0[..., :, None], by0[..., None, :])).clamp_min(0)
    inter = iw * ih
    area_a = (a[..., 2] * a[..., 3])[..., :, None]
    area_b = (b[..., 2] * b[..., 3])[..., None, :]
    return inter / (area_a + area_b - inter).clamp_min(1e-12)


def attack_loss_batch(conf: torch.Tensor, boxes: torch.Tensor, targets: torch.Tensor,
                      smooth: bool = False, temperature: float = SMOOTH_MAX_TEMPERATURE) -> torch.Tensor:
    """Per-sample ``|| conf * [iou > 0.3] ||_inf``.

    ``conf`` is ``(B, N)``, ``boxes`` ``(B, N, 4)``, ``targets`` ``(B, M, 4)``.
    Samples with no selected detection score 0. ``smooth`` swaps the exact
    max for a log-sum-exp over the selected detections.
    """
    if targets.ndim == 2:
        targets = targets[:, None, :]
    with torch.no_grad():
        sel = box_iou(boxes, targets).amax(dim=-1) > IOU_SELECT
    any_sel = sel.any(dim=-1)
    if smooth:
        logits = torch.where(sel, conf * temperature, torch.full_like(conf, -torch.inf))
        safe = torch.where(any_sel[:, None], logits, torch.zeros_like(logits))
        value = torch.logsumexp(safe, dim=-1) / temperature
    else:
        value = torch.where(sel, conf, torch.full_like(conf, -torch.inf)).amax(dim=-1)
    return torch.where(any_sel, value, torch.zeros_like(value))


def attack_loss(conf: torch.Tensor, boxes: torch.Tensor, targets: torch.Tensor, **kw) -> torch.Tensor:
    """Single-image form of :func:`attack_loss_batch`."""
    return attack_loss_batch(conf[None], boxes[None], targets.reshape(1, -1, 4), **kw)[0]


class PerceptualMetric(Protocol):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-sample distance between ``(B, 3, H, W)`` batches."""


class RandomConvPerceptual(nn.Module):
    """Fixed random-feature stand-in for LPIPS.

    Two seeded 3x3 conv layers; features are unit-normalised across channels
    and compared with squared error, averaged over space and layers.
    """

    def __init__(self, seed: int = 0, widths=(8, 16)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, c_in = [], 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / (3.0 * c_in) ** 0.5)
            conv.weight.requires_grad_(False)
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats, h = [], x * 2.0 - 1.0
        for i, conv in enumerate(self.layers):
            h = conv(h)
            if i < len(self.layers) - 1:
                h = F.leaky_relu(h, 0.2)
            feats.append(h / (h.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt())
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.ndim == 3:
            return self.forward(a[None], b[None])[0]
        fa, fb = self.features(a), self.features(b)
        d = [(x - y).pow(2).sum(dim=1).mean(dim=(1, 2)) for x, y in zip(fa, fb)]
        return torch.stack(d).mean(dim=0) / 4.0


class LPIPSMetric(nn.Module):
    """Adapter for the ``lpips`` package, which is not a dependency."""

    def __init__(self, net: str = "alex"):
        super().__init__()
        try:
            import lpips
        except ImportError as exc:  # pragma: no cover - optional
            raise ImportError("LPIPSMetric needs the 'lpips' package and its pretrained weights") from exc
        self.model = lpips.LPIPS(net=net, verbose=False)

    def forward(self, a, b):  # pragma: no cover - optional
        return self.model(a * 2 - 1, b * 2 - 1).flatten()


_DEFAULT_METRIC: RandomConvPerceptual | None = None


def default_perceptual() -> RandomConvPerceptual:
    global _DEFAULT_METRIC
    if _DEFAULT_METRIC is None:
        _DEFAULT_METRIC = RandomConvPerceptual()
    return _DEFAULT_METRIC


def invisibility_loss(before: torch.Tensor, after: torch.Tensor, metric=None) -> torch.Tensor:
    """MSE plus perceptual distance; per sample for batched input."""
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {tuple(before.shape)} vs {tuple(after.shape)}")
    metric = metric or default_perceptual()
    dims = tuple(range(before.ndim - 3, before.ndim))
    mse = (before - after).pow(2).mean(dim=dims)
    return mse + metric(before, after)


def total_variation(patch: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean absolute difference over all neighbour pairs.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)``; batched input gives one value
    per sample.
    """
    dx = (patch[..., :, 1:] - patch[..., :, :-1]).abs()
    dy = (patch[..., 1:, :] - patch[..., :-1, :]).abs()
    dims = tuple(range(patch.ndim - 3, patch.ndim))
    count = dx[0].numel() + dy[0].numel() if patch.ndim == 4 else dx.numel() + dy.numel()
    return (dx.sum(dim=dims) + dy.sum(dim=dims)) / count


def latent_reg(z: torch.Tensor, patch: torch.Tensor, gamma: float, beta: float) -> torch.Tensor:
    """``gamma * ||z||^2 + beta * TV(patch)``; per sample for batched input."""
    if gamma < 0 or beta < 0:
        raise ValueError("gamma and beta must be nonnegative")
    return gamma * z.pow(2).sum(dim=-1) + beta * total_variation(patch)


def residual_fuse(l_atk, l_res, lam):
    return lam * l_atk + (1 - lam) * l_res


def gcatk_loss(L: torch.Tensor, lam: torch.Tensor, alpha: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Hadamard-weighted loss ``sum_ij (lam * alpha^T * L)_ij``.

    ``L`` and ``lam`` are ``(b, t)``; ``alpha`` is a length-``t`` vector on the
    simplex. ``reduction="mean"`` divides by the batch size.
    """
    if L.shape != lam.shape or L.ndim != 2 or alpha.shape != (L.shape[1],):
        raise ValueError(f"shape mismatch: L {tuple(L.shape)}, lambda {tuple(lam.shape)}, alpha {tuple(alpha.shape)}")
    if bool((alpha <= 0).any()) or abs(float(alpha.sum()) - 1.0) > 1e-6:
        raise ValueError(f"alpha must be positive and sum to 1, got {alpha.tolist()}")
    total = (lam * alpha[None, :].to(L.dtype) * L).sum()
    if reduction == "mean":
        return total / L.shape[0]
    return total


def lambda_rows(lam: torch.Tensor) -> torch.Tensor:
    """Two-task weight rows ``[lam_i, 1 - lam_i]``."""
    return torch.stack([lam, 1.0 - lam], dim=-1)
