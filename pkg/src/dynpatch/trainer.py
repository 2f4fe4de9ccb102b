"""End-to-end generator training with skewness-driven task weighting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .conditioning import sample_lambda
from .controller import AlphaState, StreamingStats, skewness_of, step_alpha, update_stats
from .generator import (GeneratorConfig, PatchGenerator, load_checkpoint, save_checkpoint,
                        stack_observations, vae_loss)
from .objectives import (attack_loss_batch, default_perceptual, gcatk_loss, invisibility_loss,
                         lambda_rows, latent_reg)
from .scene_sim import PRESETS, apply_patch_batch, build_observation, sample_theta
from .victim import freeze


class NonFiniteLossError(FloatingPointError):
    """The composed loss itself is NaN or infinite (not a gradient skip)."""


class TrainingAborted(RuntimeError):
    """Too many skipped steps within one epoch."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 30
    gamma: float = 1.0
    tv_weight: float = 1.0
    vae_beta: float = 1.0
    vae_weight: float = 1.0
    preset: str = "Base"
    seed: int = 0
    skip_nonfinite: bool = True
    grad_norm_patch: bool = True
    residual_task: bool = True
    latent_reg: bool = True
    alpha0: float = 1.0
    controller_lr: float = 1e-2
    target_skew: float = 0.0
    augment: bool = True
    temperature: float = 30.0
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        for name in ("batch_size", "lr", "alpha0", "controller_lr", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gamma", "tv_weight", "vae_beta", "vae_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")


@dataclass
class TrainState:
    generator: PatchGenerator
    optimizer: torch.optim.Optimizer
    alpha: AlphaState
    stats: StreamingStats = field(default_factory=StreamingStats)
    step: int = 0
    skips: int = 0
    epoch: int = 0
    best_attack: float = math.inf

    @classmethod
    def fresh(cls, gen_config: GeneratorConfig, config: TrainConfig) -> "TrainState":
        torch.manual_seed(config.seed)
        gen = PatchGenerator(gen_config)
        opt = torch.optim.Adam(gen.parameters(), lr=config.lr)
        alpha = AlphaState.init(config.alpha0, lr=config.controller_lr, target=config.target_skew)
        return cls(gen, opt, alpha)


def _unit_rows(grad: torch.Tensor) -> torch.Tensor:
    norms = grad.flatten(1).norm(dim=1).clamp_min(1e-12)
    return grad / norms.view(-1, *([1] * (grad.ndim - 1)))


def step_seeds(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step)]))


def train_step(state: TrainState, batch, config: TrainConfig, detector, perceptual=None,
               grad_hook: Callable[[PatchGenerator], None] | None = None):
    """One optimisation step; returns ``(state, metrics)``.

    ``grad_hook`` runs after backward and before the finiteness check, which
    lets tests inject faults.
    """
    batch = [s for s in batch if s.boxes]
    if not batch:
        raise ValueError("batch has no scene with a target box")
    gen = state.generator
    gen.train()
    perceptual = perceptual or default_perceptual()
    rng = step_seeds(config.seed, state.step)
    b = len(batch)

    if config.residual_task:
        lam = sample_lambda(b, rng.integers(2**63)).values
    else:
        lam = np.ones(b)
        rng.integers(2**63)
    thetas = [sample_theta(s, config.preset, int(rng.integers(2**31))) for s in batch]
    obs = [build_observation(s, th, int(rng.integers(2**31)), augment=config.augment,
                             local_size=gen.cfg.local_size) for s, th in zip(batch, thetas)]
    eps_gen = torch.Generator().manual_seed(int(rng.integers(2**31)))

    images = torch.stack([s.image for s in batch])
    targets = torch.tensor([[s.boxes[th.target_box][1:]] for s, th in zip(batch, thetas)], dtype=images.dtype)
    lam_t = torch.as_tensor(lam, dtype=images.dtype)

    local, gm = stack_observations(obs)
    z = gen.encode(local, gm, lam_t)
    delta = gen.decode(z)
    # Only the gradient arriving through the rendered scene is normalised per
    # sample; the TV term reaches ``delta`` directly and keeps its scale.
    delta_scene = delta.view_as(delta)
    if config.grad_norm_patch:
        delta_scene.register_hook(_unit_rows)
    adv = apply_patch_batch(images, delta_scene, thetas)
    conf, boxes = detector.predict(adv)
    l_atk = attack_loss_batch(conf, boxes, targets, smooth=True, temperature=config.temperature)
    l_inv = invisibility_loss(images, adv, perceptual)
    weights = torch.as_tensor(state.alpha.task_weights(), dtype=images.dtype)
    l_gca = gcatk_loss(torch.stack([l_atk, l_inv], dim=1), lambda_rows(lam_t), weights, reduction="mean")
    gamma = config.gamma if config.latent_reg else 0.0
    l_reg = latent_reg(z, delta, gamma, config.tv_weight).mean()
    l_vae, vae_mse, vae_kl = vae_loss(gen, images, beta=config.vae_beta, generator=eps_gen)
    total = l_gca + l_reg + config.vae_weight * l_vae
    if not bool(torch.isfinite(total)):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {float(total.detach())}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if grad_hook is not None:
        grad_hook(gen)
    grads = [p.grad for p in gen.parameters() if p.grad is not None]
    finite = all(bool(torch.isfinite(g).all()) for g in grads)
    grad_inf = max(float(g.abs().max()) for g in grads) if finite else math.inf

    skipped = not finite
    if skipped:
        if not config.skip_nonfinite:
            raise NonFiniteLossError(f"non-finite gradient at step {state.step}")
        state.optimizer.zero_grad(set_to_none=True)
        state.skips += 1
    else:
        state.optimizer.step()
        if config.residual_task:
            inv = l_inv.detach().numpy()
            state.stats = update_stats(state.stats, inv, lam)
            skew = skewness_of(inv, state.stats)
            state.alpha = step_alpha(state.alpha, skew)
    skew_val = skewness_of(l_inv.detach().numpy(), state.stats) if state.stats.count else 0.0

    ones = lam == 1.0
    metrics = {
        "step": state.step, "epoch": state.epoch,
        "loss_total": float(total.detach()), "loss_gcatk": float(l_gca.detach()), "loss_reg": float(l_reg.detach()),
        "loss_vae": float(l_vae.detach()), "vae_mse": float(vae_mse.detach()), "vae_kl": float(vae_kl.detach()),
        "loss_atk": float(l_atk.detach().mean()), "loss_inv": float(l_inv.detach().mean()),
        "loss_atk_lam1": float(l_atk.detach()[torch.from_numpy(ones)].mean()) if ones.any() else None,
        "z_norm": float(z.detach().norm(dim=1).mean()),
        "alpha": float(state.alpha.alpha[0]), "skew": float(skew_val),
        "grad_inf": grad_inf, "skipped": skipped, "skips": state.skips,
    }
    state.step += 1
    return state, metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_train_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    extra = {"optimizer": state.optimizer.state_dict(), "alpha": asdict(state.alpha),
             "stats": asdict(state.stats), "skips": state.skips, "epoch": state.epoch,
             "best_attack": state.best_attack, "train_config": asdict(config)}
    if not np.all(np.isfinite(state.alpha.beta)) or not math.isfinite(state.stats.mean):
        raise ValueError("refusing to persist a non-finite controller state")
    for p in state.generator.parameters():
        if not bool(torch.isfinite(p).all()):
            raise ValueError("refusing to persist non-finite generator weights")
    tmp = Path(str(path) + ".tmp")
    save_checkpoint(tmp, state.generator, state.step, extra)
    tmp.replace(path)


def load_train_checkpoint(path, config: TrainConfig) -> TrainState:
    gen, blob = load_checkpoint(path)
    extra = blob["extra"]
    opt = torch.optim.Adam(gen.parameters(), lr=config.lr)
    opt.load_state_dict(extra["optimizer"])
    a = dict(extra["alpha"])
    a["adam_betas"] = tuple(a["adam_betas"])
    return TrainState(gen, opt, AlphaState(**a), StreamingStats(**extra["stats"]), blob["step"],
                      extra["skips"], extra["epoch"], extra["best_attack"])


# ---------------------------------------------------------------------------
# loop


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_003, int(epoch)])).permutation(n)


def train(dataset, config: TrainConfig, detector, gen_config: GeneratorConfig | None = None,
          run_dir=None, resume: bool = False, perceptual=None, on_step=None,
          max_steps: int | None = None) -> TrainState:
    """Run ``config.epochs`` epochs of :func:`train_step`.

    With ``run_dir`` set, metrics go to ``metrics.jsonl`` and checkpoints to
    ``last.pt`` (every epoch) and ``best.pt`` (lowest mean attack loss at
    lambda = 1). ``resume`` continues from ``last.pt``.
    """
    scenes = [s for s in dataset if s.boxes]
    if not scenes:
        raise ValueError("training set has no scene with a target box")
    freeze(detector)
    gen_config = gen_config or GeneratorConfig.toy()
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = run_dir / "metrics.jsonl"

    if resume:
        if run_dir is None or not (run_dir / "last.pt").exists():
            raise FileNotFoundError("nothing to resume: no last.pt in run directory")
        state = load_train_checkpoint(run_dir / "last.pt", config)
        if metrics_file.exists():
            kept = [ln for ln in metrics_file.read_text().splitlines() if ln and json.loads(ln)["step"] < state.step]
            metrics_file.write_text("".join(ln + "\n" for ln in kept))
    else:
        state = TrainState.fresh(gen_config, config)
        if metrics_file is not None:
            metrics_file.write_text("")

    perceptual = perceptual or default_perceptual()
    steps_per_epoch = math.ceil(len(scenes) / config.batch_size)
    while state.epoch < config.epochs:
        order = _epoch_order(config.seed, state.epoch, len(scenes))
        start = state.step - state.epoch * steps_per_epoch
        skips_before = state.skips
        atk1 = []
        for k in range(max(start, 0), steps_per_epoch):
            if max_steps is not None and state.step >= max_steps:
                return state
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            state, m = train_step(state, [scenes[i] for i in idx], config, detector, perceptual)
            if m["loss_atk_lam1"] is not None:
                atk1.append(m["loss_atk_lam1"])
            if metrics_file is not None:
                with metrics_file.open("a") as fh:
                    fh.write(json.dumps(m) + "\n")
            if on_step is not None:
                on_step(state, m)
        skipped = state.skips - skips_before
        if skipped > config.max_skip_fraction * steps_per_epoch:
            raise TrainingAborted(f"epoch {state.epoch}: {skipped}/{steps_per_epoch} steps skipped "
                                  f"(> {config.max_skip_fraction:.0%}); training is unstable")
        state.epoch += 1
        epoch_atk = float(np.mean(atk1)) if atk1 else math.inf
        if run_dir is not None:
            save_train_checkpoint(run_dir / "last.pt", state, config)
        if epoch_atk < state.best_attack:
            state.best_attack = epoch_atk
            if run_dir is not None:
                save_train_checkpoint(run_dir / "best.pt", state, config)
    return state


def read_metrics(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


@torch.no_grad()
def generate_patches(gen: PatchGenerator, scenes, thetas, lam, augment: bool = False, seed: int = 0,
                     batch_size: int = 64) -> torch.Tensor:
    """Patches for ``(scene, theta)`` pairs at a fixed lambda (inference mode)."""
    gen.eval()
    out = []
    for k in range(0, len(scenes), batch_size):
        chunk = list(zip(scenes[k:k + batch_size], thetas[k:k + batch_size]))
        obs = [build_observation(s, th, seed + k + j, augment=augment, local_size=gen.cfg.local_size)
               for j, (s, th) in enumerate(chunk)]
        local, gm = stack_observations(obs)
        lam_t = torch.full((len(chunk),), float(lam))
        out.append(gen.decode(gen.encode(local, gm, lam_t)))
    return torch.cat(out) if out else torch.empty(0)
