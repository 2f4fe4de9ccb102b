"""End-to-end toy run: detector, generator, lambda sweep and trade-off curve.

    python demos/toy_attack.py --out demo-run            # about 15 minutes on one core
    python demos/toy_attack.py --out demo-run --quick    # under a minute, weak detector and attack

The same steps are available one at a time through the ``dynpatch`` CLI;
this script strings them together and prints what happens at each stage.
"""
import argparse
import dataclasses
import time
from pathlib import Path

import torch

from dynpatch.cli import load_settings
from dynpatch.datasets import synthetic_scenes
from dynpatch.evaluator import NoisePatch, ad_curve, eval_run, merge_reports
from dynpatch.trainer import train
from dynpatch.victim import train_toy_detector


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo-run")
    ap.add_argument("--quick", action="store_true", help="shrink every budget for a fast look")
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    s = load_settings("builtin:toy.yaml", [])
    if args.quick:
        s = dataclasses.replace(
            s,
            data=dataclasses.replace(s.data, train_scenes=400, test_scenes=10),
            detector=dataclasses.replace(s.detector, epochs=8, min_ap=0.0),
            trainer=dataclasses.replace(s.trainer, epochs=2),
            eval=dataclasses.replace(s.eval, n_theta=2),
        )
    d = s.data
    kw = dict(size=d.image_size, min_side=d.min_side, max_side=d.max_side, max_objects=d.max_objects)
    train_set = synthetic_scenes(d.train_scenes, d.train_seed, **kw)
    holdout = synthetic_scenes(d.holdout_scenes, d.holdout_seed, **kw)
    test = synthetic_scenes(d.test_scenes, d.test_seed, **kw)

    t0 = time.perf_counter()
    detector = train_toy_detector(train_set, s.detector.epochs, s.seed, holdout=holdout, width=s.detector.width,
                                  min_ap=s.detector.min_ap, occlusion=s.detector.occlusion,
                                  context_dilation=s.detector.context_dilation)
    print(f"[1] toy detector: held-out AP50 {detector.holdout_ap50:.3f} ({time.perf_counter() - t0:.0f} s)")

    t0 = time.perf_counter()

    def progress(state, m):
        if m["step"] % 100 == 0:
            print(f"    step {m['step']:>5}: attack {m['loss_atk']:.3f} inv {m['loss_inv']:.4f} "
                  f"alpha {m['alpha']:.2f} skew {m['skew']:+.2f}")

    state = train(train_set, s.trainer, detector, s.generator, run_dir=out / "train", on_step=progress)
    print(f"[2] generator: {state.step} steps, final alpha {state.alpha.alpha[0]:.2f} "
          f"({time.perf_counter() - t0:.0f} s)")

    gen = state.generator.eval()
    e = s.eval
    report = merge_reports([
        eval_run(None, test, e.preset, [1.0], detector, s.seed, e.n_theta),
        eval_run(NoisePatch(s.generator.patch_side, s.seed), test, e.preset, [1.0], detector, s.seed, e.n_theta),
        eval_run(gen, test, e.preset, e.lambdas, detector, s.seed, e.n_theta),
    ])
    print("[3] evaluation")
    for r in report.rows:
        lam = "-" if r.lam is None else f"{r.lam:.2f}"
        print(f"    {r.attack:>10} lambda {lam:>4}: AP50 {r.ap50:.3f}  SSIM {r.ssim:.3f}  inv {r.inv_loss:.5f}")
    paths = report.save(out / "eval")
    curve = ad_curve(report, out / "curve.svg", attack="generator")
    print(f"[4] report {paths['json']}, curve {out / 'curve.svg'} ({len(curve['points'])} points)")


if __name__ == "__main__":
    main()
