"""Skewness-driven task weighting.

The relative weight of the residual (invisibility) task is ``alpha =
exp(beta)``. Each step measures the skewness of the invisibility losses,
standardised by streaming statistics of the ``lambda in {0, 1}`` samples,
and moves ``beta`` with Adam so that the skewness approaches its target.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SIGMA_FLOOR = 1e-6
EMA_MOMENTUM = 0.99
CONTROLLER_LR = 1e-2


@dataclass(frozen=True)
class StreamingStats:
    mean: float = 0.0
    var: float = 1.0
    momentum: float = EMA_MOMENTUM
    floor: float = SIGMA_FLOOR
    count: int = 0

    @property
    def std(self) -> float:
        return max(float(np.sqrt(max(self.var, 0.0))), self.floor)


def update_stats(stats: StreamingStats, batch_losses, batch_lambdas) -> StreamingStats:
    """EMA update from the samples whose lambda is exactly 0 or 1.

    The first update with data replaces the initial values outright; later
    ones follow ``s <- m * s + (1 - m) * batch``.
    """
    losses = np.asarray(batch_losses, dtype=np.float64)
    lams = np.asarray(batch_lambdas, dtype=np.float64)
    sel = losses[(lams == 0.0) | (lams == 1.0)]
    if sel.size == 0:
        return stats
    if not np.all(np.isfinite(sel)):
        raise ValueError("non-finite loss in controller statistics")
    b_mean, b_var = float(sel.mean()), float(sel.var())
    if stats.count == 0:
        return replace(stats, mean=b_mean, var=b_var, count=1)
    m = stats.momentum
    return replace(stats, mean=m * stats.mean + (1 - m) * b_mean,
                   var=m * stats.var + (1 - m) * b_var, count=stats.count + 1)


def skewness_of(losses, stats: StreamingStats) -> float:
    """Mean standardised third moment against the streaming mean and std."""
    x = (np.asarray(losses, dtype=np.float64) - stats.mean) / stats.std
    return float(np.mean(x ** 3))


@dataclass(frozen=True)
class AlphaState:
    """Controller state; ``beta`` has one entry per residual task.

    The attack task is anchored at ``beta = 0`` so the normalised task
    weights are ``softmax([0, beta...])``.
    """

    beta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    m: np.ndarray = field(default_factory=lambda: np.zeros(1))
    v: np.ndarray = field(default_factory=lambda: np.zeros(1))
    step: int = 0
    target: float = 0.0
    lr: float = CONTROLLER_LR
    adam_betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def init(cls, alpha0: float = 1.0, n_residual: int = 1, **kw) -> "AlphaState":
        beta = np.full(n_residual, np.log(alpha0), dtype=np.float64)
        return cls(beta=beta, m=np.zeros(n_residual), v=np.zeros(n_residual), **kw)

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.beta)

    def task_weights(self) -> np.ndarray:
        logits = np.concatenate([[0.0], self.beta])
        e = np.exp(logits - logits.max())
        return e / e.sum()


def step_alpha(state: AlphaState, skew) -> AlphaState:
    """One Adam descent step on ``beta`` with gradient ``target - skew``."""
    grad = state.target - np.atleast_1d(np.asarray(skew, dtype=np.float64))
    b1, b2 = state.adam_betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad ** 2
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    beta = state.beta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, beta=beta, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# synthetic trade-off testbed


@dataclass(frozen=True)
class ConcaveTradeoff:
    """Optimal responses on a convex trade-off curve ``atk = scale * exp(-inv)``.

    For a sample with magnitude ``lam`` and invisibility weight ``a`` (the
    residual entry of the normalised task weights) the loss
    ``lam * (1 - a) * atk + (1 - lam) * a * inv`` is minimised at
    ``inv = log(scale * lam * (1 - a) / ((1 - lam) * a))``, clipped to
    ``[0, inv_max]``.
    """

    scale: float = 73.890560989306502  # 10 * e^2: balance at alpha = 10 when inv_max = 4
    inv_max: float = 4.0

    def responses(self, lam: np.ndarray, a: float) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        with np.errstate(divide="ignore"):
            x = np.log(self.scale * lam * (1 - a)) - np.log((1 - lam) * a)
        return np.clip(x, 0.0, self.inv_max)

    def balanced_alpha(self) -> float:
        """Relative weight at which the uniform-lambda responses are symmetric."""
        return self.scale * float(np.exp(-self.inv_max / 2.0))


def run_closed_loop(testbed: ConcaveTradeoff, alpha0: float, steps: int = 500, batch: int = 256,
                    seed: int = 0, lr: float = CONTROLLER_LR, target: float = 0.0):
    """Iterate (sample lambdas, optimal responses, stats, skew, step) on the testbed.

    Returns the final controller state and a per-step trace of
    ``(skew, alpha)``.
    """
    from .conditioning import sample_lambda

    state = AlphaState.init(alpha0, lr=lr, target=target)
    stats = StreamingStats()
    trace = []
    for k in range(steps):
        lam = sample_lambda(batch, np.random.SeedSequence([seed, k])).values
        a = float(state.task_weights()[1])
        inv = testbed.responses(lam, a)
        stats = update_stats(stats, inv, lam)
        skew = skewness_of(inv, stats)
        state = step_alpha(state, skew)
        trace.append((skew, float(state.alpha[0])))
    return state, trace


def population_skew(testbed: ConcaveTradeoff, alpha: float, n: int = 20001) -> float:
    """Skewness of the testbed's response distribution at a fixed ``alpha``.

    Uses the exact lambda mixture: a quarter at 0, a quarter at 1 and a dense
    quantile grid for the uniform half.
    """
    a = alpha / (1.0 + alpha)
    u = (np.arange(n) + 0.5) / n
    lo, hi = testbed.responses(np.zeros(1), a)[0], testbed.responses(np.ones(1), a)[0]
    mu, sigma = (lo + hi) / 2.0, max(abs(hi - lo) / 2.0, SIGMA_FLOOR)
    mid = testbed.responses(u, a)
    z3 = lambda x: ((x - mu) / sigma) ** 3  # noqa: E731
    return float(0.25 * z3(lo) + 0.25 * z3(hi) + 0.5 * np.mean(z3(mid)))
