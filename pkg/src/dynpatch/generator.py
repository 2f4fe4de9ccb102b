"""Scene-conditioned patch generator ``Dec(Enc(observation, lambda))``.

The encoder fuses a local-crop tower and a global-image-plus-mask tower with
the lambda embedding; a natural-image branch shares the local tower and the
decoder and is trained as a beta-VAE.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import LambdaEmbedding

CHECKPOINT_FORMAT = "dynpatch-generator/1"


@dataclass
class GeneratorConfig:
    latent_dim: int = 512
    patch_side: int = 256
    local_size: int = 256
    global_size: int = 256
    enc_width: int = 32
    dec_width: int = 64
    head_width: int = 512
    lambda_hidden: int = 64

    def __post_init__(self):
        s = self.patch_side
        if s < 16 or s & (s - 1):
            raise ValueError(f"patch side must be a power of two >= 16, got {s}")
        if self.latent_dim < 8:
            raise ValueError(f"latent dim must be >= 8, got {self.latent_dim}")

    @classmethod
    def toy(cls, **kw) -> "GeneratorConfig":
        base = dict(latent_dim=128, patch_side=16, local_size=32, global_size=64,
                    enc_width=16, dec_width=32, head_width=128)
        base.update(kw)
        return cls(**base)


class Tower(nn.Module):
    """Four stride-2 conv blocks pooled onto a coarse ``grid x grid`` layout.

    A global mean would make the features blind to where the patch sits, and
    the best patch depends heavily on that. With ``coords`` two coordinate
    planes are appended to the input.
    """

    def __init__(self, c_in: int, width: int, grid: int = 4, coords: bool = False):
        super().__init__()
        self.coords = coords
        chans = [c_in + 2 * coords, width, 2 * width, 4 * width, 4 * width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, 2, 1), nn.GroupNorm(4, b), nn.SiLU()]
        self.net = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.out_dim = chans[-1] * grid * grid

    def forward(self, x):
        if self.coords:
            b, _, h, w = x.shape
            ys = torch.linspace(-1, 1, h, dtype=x.dtype).view(1, 1, h, 1).expand(b, 1, h, w)
            xs = torch.linspace(-1, 1, w, dtype=x.dtype).view(1, 1, 1, w).expand(b, 1, h, w)
            x = torch.cat([x, xs, ys], dim=1)
        return self.pool(self.net(x)).flatten(1)


def _mlp(c_in, hidden, c_out):
    return nn.Sequential(nn.Linear(c_in, hidden), nn.SiLU(), nn.Linear(hidden, c_out))


class UpBlock(nn.Module):
    """Upsampling residual block with latent feature-wise modulation."""

    def __init__(self, c: int, latent_dim: int):
        super().__init__()
        self.film1 = nn.Linear(latent_dim, 2 * c)
        self.film2 = nn.Linear(latent_dim, 2 * c)
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)
        self.skip = nn.Conv2d(c, c, 1)

    @staticmethod
    def _mod(h, film, z):
        g, b = film(z).chunk(2, dim=-1)
        return h * (1 + g[..., None, None]) + b[..., None, None]

    def forward(self, x, z):
        h = F.silu(self._mod(x, self.film1, z))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = F.silu(self._mod(h, self.film2, z))
        h = self.conv2(h)
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.dec_width
        self.start = max(2, cfg.patch_side // 32)
        self.width = c
        self.stem = nn.Linear(cfg.latent_dim, c * self.start * self.start)
        self.blocks = nn.ModuleList([UpBlock(c, cfg.latent_dim) for _ in range(3)])
        n_tconv = int(math.log2(cfg.patch_side // (self.start * 8)))
        self.tconvs = nn.ModuleList([nn.ConvTranspose2d(c, c, 4, 2, 1) for _ in range(n_tconv)])
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, z):
        h = self.stem(z).view(-1, self.width, self.start, self.start)
        for blk in self.blocks:
            h = blk(h, z)
        for tc in self.tconvs:
            h = F.silu(tc(h))
        return torch.sigmoid(self.out(F.silu(h)))


class PatchGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        cfg = cfg or GeneratorConfig()
        self.cfg = cfg
        d = cfg.latent_dim
        self.local_tower = Tower(3, cfg.enc_width)
        self.global_tower = Tower(4, cfg.enc_width, coords=True)
        self.local_mlp = _mlp(self.local_tower.out_dim, d, d)
        self.global_mlp = _mlp(self.global_tower.out_dim, d, d)
        self.local_norm = nn.LayerNorm(d)
        self.global_norm = nn.LayerNorm(d)
        self.lambda_mlp = LambdaEmbedding(d, cfg.lambda_hidden)
        self.head = _mlp(d, cfg.head_width, d)
        self.natural_mlp = _mlp(self.local_tower.out_dim, d, 2 * d)
        self.decoder = Decoder(cfg)

    def scene_features(self, local: torch.Tensor, global_mask: torch.Tensor) -> torch.Tensor:
        """Scene part of the pre-head latent (no lambda term)."""
        cfg = self.cfg
        if local.shape[-1] != cfg.local_size or local.shape[-2] != cfg.local_size:
            local = F.interpolate(local, size=(cfg.local_size, cfg.local_size), mode="bilinear", align_corners=False)
        if global_mask.shape[-1] != cfg.global_size or global_mask.shape[-2] != cfg.global_size:
            global_mask = F.interpolate(global_mask, size=(cfg.global_size, cfg.global_size), mode="bilinear",
                                        align_corners=False)
        zl = self.local_norm(self.local_mlp(self.local_tower(local)))
        zg = self.global_norm(self.global_mlp(self.global_tower(global_mask)))
        return zl + zg

    def encode(self, local, global_mask, lam, return_pre: bool = False):
        if global_mask.shape[1] != 4 or local.shape[1] != 3:
            raise ValueError(f"expected local (B,3,..) and global+mask (B,4,..), got {tuple(local.shape)}, "
                             f"{tuple(global_mask.shape)}")
        lam = torch.as_tensor(lam, dtype=local.dtype).reshape(-1)
        if lam.numel() == 1 and local.shape[0] > 1:
            lam = lam.expand(local.shape[0])
        pre = self.scene_features(local, global_mask) + self.lambda_mlp(lam)
        z = self.head(pre)
        return (z, pre) if return_pre else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def encode_natural(self, images: torch.Tensor):
        cfg = self.cfg
        if images.shape[-1] != cfg.local_size or images.shape[-2] != cfg.local_size:
            images = F.interpolate(images, size=(cfg.local_size, cfg.local_size), mode="bilinear", align_corners=False)
        mu, logvar = self.natural_mlp(self.local_tower(images)).chunk(2, dim=-1)
        return mu, logvar.clamp(-10.0, 10.0)

    def forward(self, local, global_mask, lam):
        z = self.encode(local, global_mask, lam)
        return self.decode(z), z


def stack_observations(observations) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch observations into ``(local, concat[global, mask])`` tensors."""
    local = torch.stack([o.local for o in observations])
    gm = torch.stack([torch.cat([o.global_, o.mask.reshape(1, *o.global_.shape[-2:])], dim=0) for o in observations])
    return local, gm


def encode_scene(model: PatchGenerator, obs, lam) -> torch.Tensor:
    """Latent for one observation."""
    local, gm = stack_observations([obs])
    return model.encode(local, gm, lam)[0]


def decode_patch(model: PatchGenerator, z: torch.Tensor) -> torch.Tensor:
    return model.decode(z[None] if z.ndim == 1 else z)[0 if z.ndim == 1 else slice(None)]


def encode_natural(model: PatchGenerator, image: torch.Tensor):
    mu, logvar = model.encode_natural(image[None] if image.ndim == 3 else image)
    return (mu[0], logvar[0]) if image.ndim == 3 else (mu, logvar)


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample ``KL(N(mu, exp(logvar)) || N(0, I))``."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def vae_loss(model: PatchGenerator, images: torch.Tensor, beta: float = 1.0, generator=None):
    """Beta-VAE loss through the shared decoder, normalised per output element.

    ``images`` are resized to the patch side for the reconstruction target.
    Returns ``(loss, reconstruction_mse, kl)``.
    """
    mu, logvar = model.encode_natural(images)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + eps * (0.5 * logvar).exp()
    recon = model.decode(z)
    target = F.interpolate(images, size=recon.shape[-2:], mode="bilinear", align_corners=False)
    mse = (recon - target).pow(2).mean()
    kl = kl_standard_normal(mu, logvar).mean()
    n = recon[0].numel()
    return mse + beta * kl / n, mse, kl


def save_checkpoint(path, model: PatchGenerator, step: int = 0, extra: dict | None = None) -> None:
    blob = {"format": CHECKPOINT_FORMAT, "config": asdict(model.cfg), "step": int(step),
            "state_dict": model.state_dict(), "extra": extra or {}}
    torch.save(blob, path)


def load_checkpoint(path) -> tuple[PatchGenerator, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported generator checkpoint format {blob.get('format')!r}")
    model = PatchGenerator(GeneratorConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    return model, blob
