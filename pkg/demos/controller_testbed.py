"""Watch the skewness controller settle on a synthetic trade-off.

    python demos/controller_testbed.py

The testbed replaces the generator by the closed-form optimal responses of a
convex trade-off, so the only moving part is the controller. Whatever the
starting weight, alpha should drift to the value at which the invisibility
losses across the lambda batch are symmetric (10 for the default testbed).
"""
import numpy as np

from dynpatch.controller import ConcaveTradeoff, population_skew, run_closed_loop


def main():
    bed = ConcaveTradeoff()
    print(f"balanced alpha for this testbed: {bed.balanced_alpha():.3f}")
    for alpha0 in (1.0, 10.0, 100.0):
        state, trace = run_closed_loop(bed, alpha0, steps=500)
        skews = np.array([s for s, _ in trace])
        alphas = np.array([a for _, a in trace])
        print(f"\nalpha0 = {alpha0}")
        for step in (0, 50, 100, 200, 300, 499):
            print(f"  step {step:>3}: alpha {alphas[step]:8.3f}  batch skew {skews[step]:+.3f}")
        final = float(state.alpha[0])
        print(f"  final alpha {final:.3f}, population skew {population_skew(bed, final):+.4f}")


if __name__ == "__main__":
    main()
