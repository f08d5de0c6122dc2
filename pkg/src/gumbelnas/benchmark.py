"""Bias / variance / MSE measurement of the estimators against the exact gradient.

Trials are processed in fixed blocks of :data:`BLOCK_TRIALS`; block ``b`` owns
the streams ``(seed, "gumbel", b)`` and ``(seed, "conditional", b)``. Runs with
the same seed therefore share their unconditional noise across estimators
(paired comparisons), and results do not depend on how blocks are scheduled.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Graph
from .estimators import (
    check_estimator,
    check_logits,
    check_temperature,
    exact_expectation_gradient,
    relaxed_softmax,
    select,
)
from .seeding import derive_rng

__all__ = [
    "BLOCK_TRIALS",
    "MIN_TRIALS",
    "CostProbe",
    "EstimatorStats",
    "QuadraticLoss",
    "SweepResult",
    "cost_scaling_probe",
    "estimator_bias_variance",
    "fit_loglog_slope",
    "sample_gradients",
    "summarize",
    "temperature_sweep",
]

BLOCK_TRIALS = 1000
MIN_TRIALS = 1000
ELEMENT_BUDGET = 1 << 21
Z95 = 1.959963984540054


@dataclass(frozen=True)
class QuadraticLoss:
    """``f(y) = ||y - target||^2``, summed over rows when ``y`` is a batch."""

    target: np.ndarray

    @classmethod
    def toward(cls, index: int, num_classes: int) -> "QuadraticLoss":
        target = np.zeros(num_classes)
        target[index] = 1.0
        return cls(target)

    def on_graph(self, graph: Graph, y_id: int) -> int:
        shape = graph.shape(y_id)
        target = np.broadcast_to(self.target, shape)
        diff = graph.sub(y_id, graph.constant(target))
        return graph.sum(graph.mul(diff, diff))

    def __call__(self, graph: Graph, y_id: int) -> int:
        return self.on_graph(graph, y_id)

    def per_category(self) -> np.ndarray:
        eye = np.eye(self.target.size)
        return ((eye - self.target) ** 2).sum(axis=1)


@dataclass(frozen=True)
class EstimatorStats:
    estimator: str
    mean: np.ndarray
    mean_ci: np.ndarray
    bias: np.ndarray
    variance: float
    ci_halfwidth: float
    mse: float
    mse_ci: float
    trials: int

    @property
    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias))


def sample_gradients(
    estimator: str,
    theta,
    lam: float,
    k: int,
    loss: QuadraticLoss,
    trials: int,
    seed: int,
) -> np.ndarray:
    """Per-trial gradient estimates, shape ``(trials, C)``."""
    estimator = check_estimator(estimator)
    theta = check_logits(theta)
    lam = check_temperature(lam)
    n_cls = theta.size
    width = k if estimator == "grmc" else 1
    rows_per_graph = max(1, ELEMENT_BUDGET // (width * n_cls))
    out = np.empty((trials, n_cls))
    for block, start in enumerate(range(0, trials, BLOCK_TRIALS)):
        stop = min(start + BLOCK_TRIALS, trials)
        rng = derive_rng(seed, "gumbel", block)
        cond_rng = derive_rng(seed, "conditional", block)
        for lo in range(start, stop, rows_per_graph):
            hi = min(lo + rows_per_graph, stop)
            graph = Graph(seed)
            tid = graph.leaf(np.tile(theta, (hi - lo, 1)), requires_grad=True)
            y, _ = select(graph, tid, estimator, lam, k, rng, cond_rng)
            graph.backward(loss.on_graph(graph, y))
            out[lo:hi] = graph.grad(tid)
    return out


def summarize(estimator: str, samples: np.ndarray, exact: np.ndarray) -> EstimatorStats:
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    sd = samples.std(axis=0, ddof=1)
    centered = ((samples - mean) ** 2).sum(axis=1)
    errors = ((samples - exact) ** 2).sum(axis=1)
    return EstimatorStats(
        estimator=estimator,
        mean=mean,
        mean_ci=Z95 * sd / math.sqrt(n),
        bias=mean - exact,
        variance=float(centered.sum() / (n - 1)),
        ci_halfwidth=float(Z95 * centered.std(ddof=1) / math.sqrt(n)),
        mse=float(errors.mean()),
        mse_ci=float(Z95 * errors.std(ddof=1) / math.sqrt(n)),
        trials=n,
    )


def estimator_bias_variance(
    estimator: str,
    theta,
    lam: float,
    k: int,
    loss: QuadraticLoss,
    trials: int,
    seed: int,
) -> EstimatorStats:
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    if not hasattr(loss, "per_category"):
        raise ValueError("exact oracle needs a category-separable loss")
    theta = check_logits(theta)
    exact = exact_expectation_gradient(loss.per_category(), theta).value
    samples = sample_gradients(estimator, theta, lam, k, loss, trials, seed)
    return summarize(estimator, samples, exact)


# -- temperature sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    estimator: str
    lambdas: np.ndarray
    variances: np.ndarray
    entropies: np.ndarray
    slope: float


def fit_loglog_slope(x, y) -> float:
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def temperature_sweep(
    estimator: str,
    theta,
    lambdas: Sequence[float],
    k: int,
    loss: QuadraticLoss,
    trials: int,
    seed: int,
    fit_max: Optional[float] = None,
) -> SweepResult:
    """Variance as a function of temperature.

    The log-log slope is fitted over grid points with ``lambda <= fit_max``
    (default: the smallest decade of the grid). Every temperature reuses the
    same noise streams, so the slope is not polluted by independent noise per
    point. ``entropies`` holds the entropy of ``softmax(theta / lambda)``.
    """
    lams = np.asarray(sorted(float(v) for v in lambdas))
    if lams.size < 4:
        raise ValueError("temperature grid needs at least 4 points")
    if np.any(lams <= 0):
        raise ValueError("temperatures must be strictly positive")
    if lams[-1] / lams[0] < 100 * (1 - 1e-9):
        raise ValueError("temperature grid must span at least two decades")
    theta = check_logits(theta)
    variances = np.array([
        estimator_bias_variance(estimator, theta, lam, k, loss, trials, seed).variance
        for lam in lams
    ])
    entropies = np.array([_entropy(relaxed_softmax(theta, lam)) for lam in lams])
    limit = 10 * lams[0] if fit_max is None else fit_max
    window = lams <= limit * (1 + 1e-9)
    if window.sum() < 2:
        raise ValueError("slope fit window holds fewer than 2 grid points")
    slope = fit_loglog_slope(lams[window], variances[window])
    return SweepResult(check_estimator(estimator), lams, variances, entropies, slope)


# -- cost scaling --------------------------------------------------------------


@dataclass(frozen=True)
class CostProbe:
    rows: list[tuple[int, int, float]]
    fit_c: float
    fit_r2: float

    def wall_ms(self, n: int, k: int) -> float:
        return next(t for nn, kk, t in self.rows if nn == n and kk == k)


def cost_scaling_probe(
    n_grid: Sequence[int],
    k_grid: Sequence[int],
    num_classes: int = 8,
    lam: float = 0.1,
    repeats: int = 3,
    seed: int = 0,
) -> CostProbe:
    """Wall time of ``n`` GRMC invocations at Monte Carlo width ``k``.

    Each cell reports the fastest of ``repeats`` runs. ``fit_c`` is the
    least-squares coefficient of ``t = c * n * k`` (no intercept) and
    ``fit_r2`` its coefficient of determination.
    """
    n_grid, k_grid = sorted(set(int(n) for n in n_grid)), sorted(set(int(k) for k in k_grid))
    if len(n_grid) < 3 or len(k_grid) < 3:
        raise ValueError("cost probe grids need at least 3 points each")
    theta = derive_rng(seed, "cost-theta").normal(size=num_classes)
    loss = QuadraticLoss.toward(0, num_classes)
    rows = []
    for n in n_grid:
        for k in k_grid:
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                sample_gradients("grmc", theta, lam, k, loss, n, seed)
                best = min(best, time.perf_counter() - t0)
            rows.append((n, k, best * 1e3))
    x = np.array([n * k for n, k, _ in rows], dtype=np.float64)
    t = np.array([ms for _, _, ms in rows])
    c = float((x @ t) / (x @ x))
    ss_res = float(((t - c * x) ** 2).sum())
    ss_tot = float(((t - t.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return CostProbe(rows, c, r2)
