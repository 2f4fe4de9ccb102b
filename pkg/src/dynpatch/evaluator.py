"""Attack benchmarking: AP, SSIM, evaluation runs, curves and the PGD baseline."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .objectives import box_iou


class UndefinedAPError(ValueError):
    pass


def _iou_np(a, b) -> float:
    ax1, ay1 = a[0] + a[2], a[1] + a[3]
    bx1, by1 = b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax1, bx1) - max(a[0], b[0]))
    ih = max(0.0, min(ay1, by1) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets, gts, iou_thresh: float = 0.5):
    """Greedy matching in confidence order (ties: lower index first).

    Returns the processing order and a true-positive flag per processed
    detection. Each detection takes the unmatched ground truth of its image
    with the highest IoU, if that IoU reaches ``iou_thresh``.
    """
    order = sorted(range(len(dets)), key=lambda k: (-float(dets[k][0]), k))
    by_image: dict = {}
    for g, (box, img) in enumerate(gts):
        by_image.setdefault(img, []).append(g)
    used = np.zeros(len(gts), dtype=bool)
    flags = []
    for k in order:
        conf, box, img = dets[k]
        best, best_iou = -1, iou_thresh
        for g in by_image.get(img, ()):
            if used[g]:
                continue
            iou = _iou_np(box, gts[g][0])
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return order, flags


def average_precision(dets, gts, iou_thresh: float = 0.5, conf_min: float = 0.0) -> float:
    """All-points interpolated AP over confidence cut points.

    ``dets`` are ``(confidence, box, image_id)``, ``gts`` ``(box, image_id)``,
    boxes xywh. Detections below ``conf_min`` are dropped before matching.
    """
    if len(gts) == 0:
        raise UndefinedAPError("AP is undefined without ground truth")
    dets = [d for d in dets if float(d[0]) >= conf_min]
    if not dets:
        return 0.0
    order, flags = match_detections(dets, gts, iou_thresh)
    confs = np.array([float(dets[k][0]) for k in order])
    tp = np.cumsum(flags)
    fp = np.cumsum(~np.asarray(flags))
    # one PR point per distinct confidence: the last detection of each tie group
    last = np.append(confs[1:] != confs[:-1], True)
    recall = tp[last] / len(gts)
    precision = tp[last] / (tp[last] + fp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


# ---------------------------------------------------------------------------
# SSIM


def _gauss_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03).

    Statistics are taken over valid window positions only and averaged over
    channels; the result is clipped to ``[0, 1]``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(ssim_batch(a.reshape(-1, *a.shape[-3:]), b.reshape(-1, *b.shape[-3:]), data_range).mean())


def ssim_batch(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    c = a.shape[1]
    win = _gauss_window().to(torch.float64)[None, None].repeat(c, 1, 1, 1)
    a, b = a.to(torch.float64), b.to(torch.float64)
    filt = lambda x: F.conv2d(x, win, groups=c)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return s.mean(dim=(1, 2, 3)).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# attack sources


class Attack:
    """Produces patches for ``(scene index, target index, scene, theta)`` items."""

    name = "attack"
    conditional = False

    def patches(self, items, lam=None) -> torch.Tensor | None:
        raise NotImplementedError


class NoAttack(Attack):
    name = "clean"

    def patches(self, items, lam=None):
        return None


class NoisePatch(Attack):
    """Uniform noise, redrawn per item from ``(seed, scene, target)``."""

    name = "noise"

    def __init__(self, side: int = 32, seed: int = 0):
        self.side, self.seed = side, seed

    def patches(self, items, lam=None):
        out = []
        for n, t, _, _ in items:
            g = torch.Generator().manual_seed(int(np.random.SeedSequence([self.seed, n, t]).generate_state(1)[0]))
            out.append(torch.rand(3, self.side, self.side, generator=g))
        return torch.stack(out)


class StaticPatch(Attack):
    """One patch for everything, or a per-``(scene, target)`` table of patches."""

    name = "static"

    def __init__(self, patch, name: str | None = None):
        self.patch = patch
        if name:
            self.name = name

    def patches(self, items, lam=None):
        if isinstance(self.patch, dict):
            return torch.stack([self.patch[(n, t)] for n, t, _, _ in items])
        return self.patch.unsqueeze(0).expand(len(items), -1, -1, -1)


class GeneratorAttack(Attack):
    name = "generator"
    conditional = True

    def __init__(self, generator, batch_size: int = 64):
        self.generator, self.batch_size = generator, batch_size

    def patches(self, items, lam=None):
        from .trainer import generate_patches

        lam = 1.0 if lam is None else lam
        return generate_patches(self.generator, [it[2] for it in items], [it[3] for it in items], lam,
                                batch_size=self.batch_size)


def as_attack(source) -> Attack:
    from .generator import PatchGenerator

    if source is None:
        return NoAttack()
    if isinstance(source, Attack):
        return source
    if isinstance(source, PatchGenerator):
        return GeneratorAttack(source)
    if isinstance(source, (torch.Tensor, dict)):
        return StaticPatch(source)
    raise TypeError(f"cannot evaluate attack source of type {type(source).__name__}")


# ---------------------------------------------------------------------------
# evaluation runs


@dataclass
class EvalRow:
    attack: str
    lam: float | None
    preset: str
    ap50: float | None
    ap01: float | None
    ssim: float | None
    perceptual: float | None
    inv_loss: float | None
    n_images: int
    error: str | None = None


@dataclass
class EvalReport:
    """Report rows plus provenance; wall-clock lives in ``timings``.

    Timings are kept out of the hashed artifacts so that two identical runs
    serialise to identical bytes.
    """

    rows: list[EvalRow]
    meta: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(EvalRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow(["" if getattr(r, k) is None else repr(getattr(r, k)) if isinstance(getattr(r, k), float)
                        else getattr(r, k) for k in names])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def config_hash(self) -> str:
        blob = json.dumps(self.meta.get("config", {}), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"report-{self.config_hash()}"
        paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv", "timing": out / f"{stem}.timing.json"}
        paths["json"].write_text(self.to_json())
        paths["csv"].write_text(self.to_csv())
        paths["timing"].write_text(json.dumps(self.timings, indent=2))
        return paths

    @classmethod
    def load(cls, path) -> "EvalReport":
        blob = json.loads(Path(path).read_text())
        timing = Path(str(path).replace(".json", ".timing.json"))
        timings = json.loads(timing.read_text()) if timing.exists() else {}
        return cls([EvalRow(**r) for r in blob["rows"]], blob["meta"], timings)

    def row(self, attack: str, lam=None) -> EvalRow:
        for r in self.rows:
            if r.attack == attack and (lam is None or (r.lam is not None and abs(r.lam - lam) < 1e-12)):
                return r
        raise KeyError(f"no row for attack {attack!r} at lambda {lam}")


def theta_seed(seed: int, scene: int, target: int, draw: int) -> int:
    return int(np.random.SeedSequence([int(seed), scene, target, draw]).generate_state(1)[0])


def expand_items(scenes, preset, seed: int, n_theta: int = 10):
    """``(scene index, target index, scene, theta)`` for every box and draw."""
    from .scene_sim import sample_theta

    items = []
    for n, s in enumerate(scenes):
        for t in range(len(s.boxes)):
            for r in range(n_theta):
                items.append((n, t, s, sample_theta(s, preset, theta_seed(seed, n, t, r), target=t)))
    return items


def score_items(items, patches, detector, perceptual=None, batch_size: int = 64) -> dict:
    """Detect on patched images and aggregate AP and similarity metrics."""
    from .objectives import default_perceptual
    from .scene_sim import apply_patch_batch
    from .victim import nms_detections, postprocess_filter

    perceptual = perceptual or default_perceptual()
    dets, gts = [], []
    ssims, percs, invs = [], [], []
    with torch.no_grad():
        for k in range(0, len(items), batch_size):
            chunk = items[k:k + batch_size]
            clean = torch.stack([it[2].image for it in chunk])
            if patches is None:
                adv = clean
            else:
                adv = apply_patch_batch(clean, patches[k:k + batch_size], [it[3] for it in chunk])
            conf, boxes = detector.predict(adv)
            for j, (_, t, s, th) in enumerate(chunk):
                target = s.boxes[th.target_box][1:]
                kept = postprocess_filter(nms_detections(conf[j], boxes[j]), [target], 0.01)
                dets.extend((d.confidence, d.box, k + j) for d in kept)
                gts.append((target, k + j))
            ssims.append(ssim_batch(clean, adv))
            p = perceptual(clean, adv)
            mse = (clean - adv).pow(2).mean(dim=(1, 2, 3))
            percs.append(p)
            invs.append(mse + p)
    return {
        "ap50": average_precision(dets, gts, 0.5, conf_min=0.5),
        "ap01": average_precision(dets, gts, 0.5, conf_min=0.01),
        "ssim": float(torch.cat(ssims).mean()),
        "perceptual": float(torch.cat(percs).mean()),
        "inv_loss": float(torch.cat(invs).mean()),
        "n_images": len(items),
    }


def eval_run(source, scenes, preset: str, lambdas, detector, seed: int, n_theta: int = 10,
             perceptual=None, attack_name: str | None = None, provenance: dict | None = None) -> EvalReport:
    """Score one attack source over every box of ``scenes`` with ``n_theta`` draws each.

    Conditional sources (a generator) give one row per lambda; others give a
    single row with ``lam=None``. A failing row is recorded with its error
    and the run continues.
    """
    from .datasets import dataset_hash

    attack = as_attack(source)
    name = attack_name or attack.name
    items = expand_items(scenes, preset, seed, n_theta)
    if not items:
        raise ValueError("evaluation set has no target boxes")
    grid = [float(x) for x in lambdas] if attack.conditional else [None]
    rows, timings = [], {}
    for lam in grid:
        t0 = time.perf_counter()
        try:
            res = score_items(items, attack.patches(items, lam), detector, perceptual)
            rows.append(EvalRow(name, lam, preset, **res))
        except Exception as exc:  # noqa: BLE001 - recorded per row by contract
            rows.append(EvalRow(name, lam, preset, None, None, None, None, None, len(items),
                                error=f"{type(exc).__name__}: {exc}"))
        timings[f"{name}@{lam}"] = time.perf_counter() - t0
    meta = {"seed": int(seed), "dataset_hash": dataset_hash(scenes), "preset": preset, "n_theta": n_theta,
            "detector_id": detector_id(detector),
            "config": {"attack": name, "preset": preset, "lambdas": grid, "seed": int(seed), "n_theta": n_theta,
                       "dataset_hash": dataset_hash(scenes)}}
    if provenance:
        meta.update(provenance)
    return EvalReport(rows, meta, timings)


def merge_reports(reports) -> EvalReport:
    reports = list(reports)
    rows = [r for rep in reports for r in rep.rows]
    meta = dict(reports[0].meta)
    meta["config"] = {"parts": [rep.meta.get("config", {}) for rep in reports]}
    timings = {k: v for rep in reports for k, v in rep.timings.items()}
    return EvalReport(rows, meta, timings)


def detector_id(detector) -> str:
    h = hashlib.sha256()
    state = detector.state_dict() if hasattr(detector, "state_dict") else {}
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().numpy().tobytes())
    return f"{getattr(detector, 'name', type(detector).__name__)}-{h.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# aggressiveness-distortion curve


def ad_curve(report: EvalReport, out_path=None, attack: str | None = None, metric: str = "inv_loss") -> dict:
    """``(distortion, AP50)`` points sorted by lambda and an SVG plot."""
    rows = [r for r in report.rows if r.lam is not None and r.error is None and (attack is None or r.attack == attack)]
    if len(rows) < 2:
        raise ValueError(f"a curve needs at least two lambda rows, got {len(rows)}")
    rows.sort(key=lambda r: r.lam)
    points = [{"lam": r.lam, "x": getattr(r, metric), "ap50": r.ap50, "ap01": r.ap01} for r in rows]
    curve = {"metric": metric, "points": points}
    if out_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        # a fixed salt keeps the generated SVG element ids identical across runs
        plt.rcParams["svg.hashsalt"] = "dynpatch"
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        xs, ys = [p["x"] for p in points], [p["ap50"] for p in points]
        ax.plot(xs, ys, "o-", color="tab:red")
        for p in points:
            ax.annotate(f"lambda={p['lam']:g}", (p["x"], p["ap50"]), fontsize=7, gid=f"row-{p['lam']:g}")
        ax.set_xlabel(metric)
        ax.set_ylabel("AP50")
        ax.set_title("aggressiveness vs distortion")
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        curve["plot"] = out_path.name
        out_path.with_suffix(".json").write_text(json.dumps(curve, indent=2))
    return curve


# ---------------------------------------------------------------------------
# PGD with expectation over transformation


def pgd_eot_batch(pairs, preset, detector, steps: int, eot_samples: int, step_size: float = 10 / 2048,
                  seed: int = 0, patch_side: int = 32, init: torch.Tensor | None = None,
                  on_step=None, temperature: float = 30.0) -> torch.Tensor:
    """Sign-gradient descent on the attack loss for many ``(scene, target)`` pairs at once.

    Each pair owns its patch; the loss of a pair is averaged over
    ``eot_samples`` fresh placements per step. Patches are clamped to
    ``[0, 1]`` after every step.
    """
    from .objectives import attack_loss_batch
    from .scene_sim import apply_patch_batch, sample_theta

    n = len(pairs)
    if init is None:
        g = torch.Generator().manual_seed(int(seed))
        patch = torch.rand(n, 3, patch_side, patch_side, generator=g)
    else:
        patch = init.clone().reshape(n, 3, *init.shape[-2:])
    if steps <= 0:
        return patch
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    images = torch.stack([s.image for s, _ in pairs]).repeat_interleave(eot_samples, dim=0)
    targets = torch.tensor([[s.boxes[t][1:]] for s, t in pairs], dtype=images.dtype).repeat_interleave(eot_samples, 0)
    for k in range(steps):
        thetas = [sample_theta(s, preset, int(rng.integers(2**31)), target=t)
                  for s, t in pairs for _ in range(eot_samples)]
        p = patch.clone().requires_grad_(True)
        adv = apply_patch_batch(images, p.repeat_interleave(eot_samples, dim=0), thetas)
        conf, boxes = detector.predict(adv)
        loss = attack_loss_batch(conf, boxes, targets, smooth=True, temperature=temperature).sum() / eot_samples
        (grad,) = torch.autograd.grad(loss, p)
        patch = (patch - step_size * grad.sign()).clamp(0.0, 1.0)
        if on_step is not None:
            on_step(k, patch)
    return patch


def pgd_eot_baseline(scene, preset, detector, steps: int, eot_samples: int, step_size: float = 10 / 2048,
                     seed: int = 0, target: int = 0, patch_side: int = 32, init: torch.Tensor | None = None,
                     on_step=None) -> torch.Tensor:
    """Per-scene PGD+EoT patch for one target box."""
    out = pgd_eot_batch([(scene, target)], preset, detector, steps, eot_samples, step_size, seed, patch_side,
                        None if init is None else init[None], on_step)
    return out[0]


def pgd_table(scenes, preset, detector, steps: int, eot_samples: int, step_size: float = 10 / 2048,
              seed: int = 0, patch_side: int = 32, chunk: int = 32) -> dict:
    """PGD patches for every ``(scene, target)`` pair, keyed by indices."""
    keys = [(n, t) for n, s in enumerate(scenes) for t in range(len(s.boxes))]
    table = {}
    for k in range(0, len(keys), chunk):
        part = keys[k:k + chunk]
        patches = pgd_eot_batch([(scenes[n], t) for n, t in part], preset, detector, steps, eot_samples,
                                step_size, seed + k, patch_side)
        table.update({key: p for key, p in zip(part, patches)})
    return table
