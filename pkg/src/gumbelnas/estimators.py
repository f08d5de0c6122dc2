"""Gumbel-Softmax gradient estimators: GS, straight-through GS and Gumbel-Rao MC.

All three share the same forward construction: unconditional Gumbel noise is
drawn first, so with equal seeds STGS and GRMC realize the same category. GRMC
then replaces the single relaxed sample in the backward path by the average of
``k`` relaxed samples whose noise is drawn conditionally on that category.

Conditional noise is treated as a constant on the graph (no derivative flows
through the conditional reparameterization), which keeps the GRMC surrogate's
expectation equal to the STGS one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Graph

__all__ = [
    "ESTIMATORS",
    "LAMBDA_MIN",
    "LAMBDA_MAX",
    "GradientEstimate",
    "HardSample",
    "check_logits",
    "check_temperature",
    "conditional_gumbel_sample",
    "exact_expectation_gradient",
    "grmc_estimate",
    "gs_estimate",
    "gumbel_from_uniform",
    "gumbel_softmax",
    "relaxed_softmax",
    "sample_gumbel",
    "select",
    "stgs_estimate",
    "straight_through",
]

ESTIMATORS = ("gs", "stgs", "grmc")
LAMBDA_MIN = 1e-4
LAMBDA_MAX = 10.0
UNIFORM_CLAMP = 1e-12

LossFn = Callable[[Graph, int], int]


@dataclass(frozen=True)
class HardSample:
    index: int
    onehot: np.ndarray


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    estimator: str


def check_temperature(lam: float) -> float:
    lam = float(lam)
    if not (LAMBDA_MIN <= lam <= LAMBDA_MAX):
        raise ValueError(f"temperature {lam} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
    return lam


def check_logits(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] < 2:
        raise ValueError(f"logits must be a vector with at least 2 entries, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("logits must be finite")
    return theta


def check_estimator(tag: str) -> str:
    tag = tag.lower()
    if tag not in ESTIMATORS:
        raise ValueError(f"unknown estimator {tag!r}; expected one of {ESTIMATORS}")
    return tag


def onehot(index, num_classes: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (num_classes,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


# -- noise ------------------------------------------------------------------


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel(0, 1) draws of the given shape (an int means a vector)."""
    return gumbel_from_uniform(rng.random(shape))


def conditional_gumbel_sample(theta, d, rng: np.random.Generator, k: Optional[int] = None) -> np.ndarray:
    """Gumbel noise ``g`` such that ``theta + g`` is distributed as
    ``theta + G`` conditioned on ``argmax(theta + G) == d``.

    ``theta`` is ``(C,)`` or ``(T, C)`` with ``d`` a matching int or ``(T,)``
    array. With ``k`` set, ``k`` independent draws are stacked on a new axis
    just before the category axis.

    The maximum of ``theta + G`` is Gumbel-distributed with location
    ``logsumexp(theta)``; the remaining coordinates are Gumbels with location
    ``theta_j`` truncated to lie below it.
    """
    theta = np.asarray(theta, dtype=np.float64)
    d = np.asarray(d)
    if np.any(d < 0) or np.any(d >= theta.shape[-1]):
        raise ValueError(f"category {d} out of range for {theta.shape[-1]} classes")
    if k is not None:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        theta_b = np.expand_dims(theta, -2)
        shape = theta.shape[:-1] + (k, theta.shape[-1])
        d_b = np.expand_dims(d, -1)
    else:
        theta_b, shape, d_b = theta, theta.shape, d
    m = theta_b.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(theta_b - m).sum(axis=-1, keepdims=True))
    log_e = np.log(rng.standard_exponential(shape))
    log_e_top = np.take_along_axis(log_e, np.broadcast_to(d_b, shape[:-1])[..., None], axis=-1)
    top = lse - log_e_top
    # -log(E_d * exp(-lse) + E_j * exp(-theta_j)), in log space
    rest = -np.logaddexp(log_e_top - lse, log_e - theta_b)
    mask = onehot(np.broadcast_to(d_b, shape[:-1]), shape[-1]).astype(bool)
    perturbed = np.where(mask, top, rest)
    return perturbed - theta_b


# -- relaxations --------------------------------------------------------------


def relaxed_softmax(logits, lam: float) -> np.ndarray:
    """Stabilized ``softmax(logits / lam)`` along the last axis, without bounds checks."""
    z = np.asarray(logits, dtype=np.float64) / lam
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax(graph: Graph, theta_id: int, lam: float, g) -> int:
    """Relaxed sample ``softmax((theta + g) / lam)`` on the graph."""
    lam = check_temperature(lam)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != graph.shape(theta_id):
        raise ValueError(f"noise shape {g.shape} does not match logits {graph.shape(theta_id)}")
    perturbed = graph.add(theta_id, graph.constant(g))
    return graph.softmax(graph.scale(perturbed, 1.0 / lam), axis=-1)


def straight_through(graph: Graph, y_id: int, hard: Optional[np.ndarray] = None) -> tuple[int, np.ndarray]:
    """Hard one-hot forward, identity backward.

    Without ``hard`` the forward value is ``onehot(argmax y)``, ties toward the
    lowest index. Returns the node id and the chosen indices.
    """
    y = graph.value(y_id)
    if hard is None:
        index = np.argmax(y, axis=-1)
        hard = onehot(index, y.shape[-1])
    else:
        index = np.argmax(hard, axis=-1)
    return graph.straight_through(y_id, hard), index


def select(
    graph: Graph,
    logits_id: int,
    estimator: str,
    lam: float,
    k: int,
    rng: np.random.Generator,
    cond_rng: Optional[np.random.Generator] = None,
) -> tuple[int, np.ndarray]:
    """Draw a categorical choice per row of ``logits_id`` and return its
    differentiable stand-in plus the realized indices.

    ``gs`` returns the relaxed sample itself. ``stgs`` and ``grmc`` return the
    hard one-hot with a straight-through surrogate; the GRMC surrogate averages
    ``k`` relaxed samples under conditional noise from ``cond_rng``.
    """
    estimator = check_estimator(estimator)
    lam = check_temperature(lam)
    theta = graph.value(logits_id)
    g = sample_gumbel(theta.shape, rng)
    index = np.argmax(theta + g, axis=-1)
    if estimator == "gs":
        return gumbel_softmax(graph, logits_id, lam, g), index
    if estimator == "stgs":
        y = gumbel_softmax(graph, logits_id, lam, g)
        return straight_through(graph, y, onehot(index, theta.shape[-1]))[0], index
    if k < 1:
        raise ValueError(f"Monte Carlo count must be >= 1, got {k}")
    if theta.ndim != 2:
        raise ValueError("grmc selection expects (rows, categories) logits")
    cond_rng = rng if cond_rng is None else cond_rng
    rows, n_cls = theta.shape
    cond = conditional_gumbel_sample(theta, index, cond_rng, k=k).reshape(rows * k, n_cls)
    tiled = graph.repeat(logits_id, k, axis=0)
    relaxed = graph.softmax(graph.scale(graph.add(tiled, graph.constant(cond)), 1.0 / lam), axis=-1)
    surrogate = graph.mean(graph.reshape(relaxed, (rows, k, n_cls)), axis=1)
    return graph.straight_through(surrogate, onehot(index, n_cls)), index


# -- single-vector estimators ---------------------------------------------------


def _single_estimate(tag, theta, lam, k, loss_fn: LossFn, rng, cond_rng=None):
    theta = check_logits(theta)
    graph = Graph()
    tid = graph.leaf(theta, requires_grad=True)
    out, index = select(graph, graph.reshape(tid, (1, theta.size)), tag, lam, k, rng, cond_rng)
    loss = loss_fn(graph, graph.reshape(out, (theta.size,)))
    graph.backward(loss)
    d = int(index[0])
    return HardSample(d, onehot(d, theta.size)), GradientEstimate(graph.grad(tid).copy(), tag.upper())


def gs_estimate(theta, lam, loss_fn: LossFn, rng) -> tuple[HardSample, GradientEstimate]:
    """Plain Gumbel-Softmax: the loss sees the relaxed sample."""
    return _single_estimate("gs", theta, lam, 1, loss_fn, rng)


def stgs_estimate(theta, lam, loss_fn: LossFn, rng) -> tuple[HardSample, GradientEstimate]:
    return _single_estimate("stgs", theta, lam, 1, loss_fn, rng)


def grmc_estimate(theta, lam, k, loss_fn: LossFn, rng, cond_rng=None) -> tuple[HardSample, GradientEstimate]:
    return _single_estimate("grmc", theta, lam, k, loss_fn, rng, cond_rng)


def exact_expectation_gradient(losses, theta) -> GradientEstimate:
    """Gradient of ``sum_k softmax(theta)_k * losses_k`` with respect to ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != theta.shape or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and match the logits shape")
    p = relaxed_softmax(theta, 1.0)
    return GradientEstimate(p * (losses - p @ losses), "EXACT")
