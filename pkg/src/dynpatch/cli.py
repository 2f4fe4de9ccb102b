"""Command-line entry point: ``dynpatch <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 unexpected error, 2 usage or configuration error,
3 missing artifact, 4 training failure, 5 runtime failure in the pipeline.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .generator import GeneratorConfig
from .trainer import TrainConfig

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_TRAINING, EXIT_RUNTIME = 0, 1, 2, 3, 4, 5
COMMANDS = ("toy-detector", "train", "eval", "curve", "baseline")
OUTPUT_ENV = "DYNPATCH_OUT"


class UsageError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class DataConfig:
    image_size: int = 64
    train_scenes: int = 2000
    train_seed: int = 1
    holdout_scenes: int = 300
    holdout_seed: int = 2
    test_scenes: int = 40
    test_seed: int = 3
    min_side: int = 24
    max_side: int = 44
    max_objects: int = 2
    coco_images: str | None = None
    coco_annotations: str | None = None


@dataclass
class DetectorConfig:
    epochs: int = 20
    width: int = 16
    occlusion: float = 0.02
    context_dilation: int = 2
    min_ap: float = 0.9


@dataclass
class EvalConfig:
    preset: str = "Base"
    lambdas: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    n_theta: int = 10
    attacks: list = field(default_factory=lambda: ["clean", "noise", "generator"])
    checkpoint: str = "best"


@dataclass
class BaselineConfig:
    steps: int = 128
    eot: int = 1
    step_size: float = 10 / 2048
    preset: str = "Base"


@dataclass
class Settings:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig.toy)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)


@dataclass
class RunConfig:
    command: str
    config_path: str | None
    seed: int
    output_dir: Path
    overrides: list
    settings: Settings
    resume: bool = False

    def effective(self) -> dict:
        return {"command": self.command, "seed": self.seed, "settings": asdict(self.settings)}

    def digest(self) -> str:
        blob = json.dumps({"seed": self.seed, "settings": asdict(self.settings)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# configuration


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise UsageError(f"{key}: expected an integer, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise UsageError(f"{key}: expected a number, got {value!r}")
    if isinstance(current, list):
        if isinstance(value, list):
            return value
        raise UsageError(f"{key}: expected a list, got {value!r}")
    if current is None or isinstance(current, str):
        if value is None or isinstance(value, str):
            return value
        raise UsageError(f"{key}: expected a string, got {value!r}")
    raise UsageError(f"{key}: unsupported value {value!r}")


def _apply(obj, values: dict, prefix: str = ""):
    """Return a copy of dataclass ``obj`` updated from a nested mapping."""
    if not isinstance(values, dict):
        raise UsageError(f"{prefix or 'config'}: expected a mapping, got {values!r}")
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in values.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise UsageError(f"unknown config key {full!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _apply(current, value, full + ".")
        else:
            updates[key] = _coerce(value, current, full)
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _nest(dotted: str, value) -> dict:
    out: dict = {}
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def bundled_config(name: str = "toy.yaml") -> str:
    return resources.files("dynpatch").joinpath("configs", name).read_text()


def load_settings(path: str | None, overrides: list[str]) -> Settings:
    settings = Settings()
    if path:
        text = bundled_config(path[len("builtin:"):]) if path.startswith("builtin:") else _read(path)
        data = yaml.safe_load(text) or {}
        settings = _apply(settings, data)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        settings = _apply(settings, _nest(key.strip(), yaml.safe_load(raw)))
    return settings


def _read(path: str) -> str:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path!r} does not exist")
    return p.read_text()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynpatch", description="Train and evaluate scene-conditioned adversarial patches.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("method", nargs="?", help="baseline method (only 'pgd')")
    parser.add_argument("--config", help="YAML file, or builtin:toy.yaml")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("--out", help=f"run directory (default: ${OUTPUT_ENV}/run-<hash> or ./runs/run-<hash>)")
    parser.add_argument("--resume", action="store_true", help="continue training from the last checkpoint")
    return parser


def parse_config(argv: list[str]) -> RunConfig:
    if not argv:
        raise UsageError("no command given")
    args = build_parser().parse_args(argv)
    if args.command == "baseline" and args.method != "pgd":
        raise UsageError("baseline needs a method; the only one is 'pgd'")
    if args.command != "baseline" and args.method is not None:
        raise UsageError(f"unexpected argument {args.method!r}")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    settings = load_settings(args.config, overrides)
    settings = dataclasses.replace(settings, trainer=dataclasses.replace(settings.trainer, seed=settings.seed))
    run = RunConfig(args.command, args.config, settings.seed, Path("."), overrides, settings, args.resume)
    if args.out:
        run.output_dir = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ENV, "runs"))
        run.output_dir = root / f"run-{run.digest()}"
    return run


# ---------------------------------------------------------------------------
# pipeline


def _scenes(settings: Settings, split: str):
    from .datasets import load_coco_subset, synthetic_scenes

    d = settings.data
    if d.coco_images and d.coco_annotations:
        scenes = load_coco_subset(d.coco_images, d.coco_annotations, resize=d.image_size)
        n_test = min(d.test_scenes, len(scenes) // 5)
        return {"train": scenes[n_test:], "holdout": scenes[:n_test], "test": scenes[:n_test]}[split]
    n, seed = {"train": (d.train_scenes, d.train_seed), "holdout": (d.holdout_scenes, d.holdout_seed),
               "test": (d.test_scenes, d.test_seed)}[split]
    return synthetic_scenes(n, seed, size=d.image_size, min_side=d.min_side, max_side=d.max_side,
                            max_objects=d.max_objects)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the producing command first")
    return path


def _record(run: RunConfig, artifacts: list[Path]) -> None:
    out = run.output_dir
    (out / f"{run.command}.config.json").write_text(json.dumps(run.effective(), indent=2, sort_keys=True))
    (out / "seed").write_text(f"{run.seed}\n")
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    for p in artifacts:
        manifest[str(p.relative_to(out))] = {"sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                                             "command": run.command, "config": run.digest()}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_toy_detector(run: RunConfig) -> list[Path]:
    import torch

    from .victim import save_detector, train_toy_detector

    s = run.settings
    torch.set_num_threads(1)
    model = train_toy_detector(_scenes(s, "train"), s.detector.epochs, run.seed, holdout=_scenes(s, "holdout"),
                               image_size=s.data.image_size, width=s.detector.width, min_ap=s.detector.min_ap,
                               occlusion=s.detector.occlusion, context_dilation=s.detector.context_dilation)
    path = run.output_dir / "detector.pt"
    save_detector(model, path)
    info = run.output_dir / "detector.json"
    info.write_text(json.dumps({"holdout_ap50": model.holdout_ap50}, indent=2))
    print(f"toy detector: held-out AP50 {model.holdout_ap50:.4f} -> {path}")
    return [path, info]


def _detector(run: RunConfig):
    from .victim import load_detector

    return load_detector(_require(run.output_dir / "detector.pt", "detector checkpoint"))


def cmd_train(run: RunConfig) -> list[Path]:
    import torch

    from .trainer import train

    torch.set_num_threads(1)
    s = run.settings
    train_dir = run.output_dir / "train"
    state = train(_scenes(s, "train"), s.trainer, _detector(run), s.generator, run_dir=train_dir, resume=run.resume)
    print(f"trained {state.step} steps, alpha {state.alpha.alpha[0]:.3f}, skipped {state.skips}")
    return [p for p in (train_dir / "last.pt", train_dir / "best.pt", train_dir / "metrics.jsonl") if p.exists()]


def cmd_eval(run: RunConfig) -> list[Path]:
    import torch

    from .evaluator import NoAttack, NoisePatch, eval_run, merge_reports
    from .generator import load_checkpoint

    torch.set_num_threads(1)
    s, e = run.settings, run.settings.eval
    detector = _detector(run)
    scenes = _scenes(s, "test")
    reports = []
    for name in e.attacks:
        if name == "clean":
            src = NoAttack()
        elif name == "noise":
            src = NoisePatch(s.generator.patch_side, run.seed)
        elif name == "generator":
            ckpt = _require(run.output_dir / "train" / f"{e.checkpoint}.pt", "generator checkpoint")
            src = load_checkpoint(ckpt)[0]
        else:
            raise UsageError(f"unknown attack {name!r} in eval.attacks")
        reports.append(eval_run(src, scenes, e.preset, e.lambdas, detector, run.seed, e.n_theta))
    report = merge_reports(reports)
    paths = report.save(run.output_dir / "eval")
    (run.output_dir / "eval" / "latest").write_text(paths["json"].name + "\n")
    for r in report.rows:
        print(f"{r.attack:>10} lam={r.lam!s:>5} AP50={r.ap50} AP01={r.ap01} SSIM={r.ssim}")
    return list(paths.values())


def cmd_curve(run: RunConfig) -> list[Path]:
    from .evaluator import EvalReport, ad_curve

    latest = _require(run.output_dir / "eval" / "latest", "evaluation report")
    report_path = _require(run.output_dir / "eval" / latest.read_text().strip(), "evaluation report")
    report = EvalReport.load(report_path)
    out = run.output_dir / "curve" / f"curve-{report.config_hash()}.svg"
    ad_curve(report, out, attack="generator")
    print(f"curve -> {out}")
    return [out, out.with_suffix(".json")]


def cmd_baseline(run: RunConfig) -> list[Path]:
    import torch

    from .evaluator import StaticPatch, eval_run, pgd_table

    torch.set_num_threads(1)
    s, b = run.settings, run.settings.baseline
    detector = _detector(run)
    scenes = _scenes(s, "test")
    table = pgd_table(scenes, b.preset, detector, b.steps, b.eot, b.step_size, run.seed, s.generator.patch_side)
    report = eval_run(StaticPatch(table, name=f"pgd-eot{b.eot}-s{b.steps}"), scenes, b.preset, [None], detector,
                      run.seed, s.eval.n_theta)
    paths = report.save(run.output_dir / "baseline")
    r = report.rows[0]
    print(f"{r.attack}: AP50={r.ap50} AP01={r.ap01} SSIM={r.ssim}")
    return list(paths.values())


HANDLERS = {"toy-detector": cmd_toy_detector, "train": cmd_train, "eval": cmd_eval, "curve": cmd_curve,
            "baseline": cmd_baseline}


def _exit_code(exc: BaseException) -> int:
    from .scene_sim import AugmentationError, InvalidTransformError, NoTargetError
    from .trainer import NonFiniteLossError, TrainingAborted
    from .victim import DetectorInputError, TrainingFailure

    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, MissingArtifact):
        return EXIT_MISSING
    if isinstance(exc, (TrainingFailure, TrainingAborted, NonFiniteLossError)):
        return EXIT_TRAINING
    if isinstance(exc, (AugmentationError, InvalidTransformError, NoTargetError, DetectorInputError, ValueError)):
        return EXIT_RUNTIME
    return EXIT_ERROR


def run(config: RunConfig) -> int:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    print(json.dumps(config.effective(), sort_keys=True))
    try:
        artifacts = HANDLERS[config.command](config)
    except Exception as exc:  # noqa: BLE001 - mapped to the documented exit codes
        code = _exit_code(exc)
        record = {"command": config.command, "exit_code": code, "error": type(exc).__name__, "message": str(exc),
                  "traceback": traceback.format_exc()}
        (config.output_dir / "error.json").write_text(json.dumps(record, indent=2))
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    _record(config, artifacts)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        sys.stderr.write(json.dumps({"exit_code": EXIT_USAGE, "error": "UsageError", "message": str(exc)}) + "\n")
        return EXIT_USAGE
    return run(config)


if __name__ == "__main__":
    raise SystemExit(main())
