"""First-order bilevel search, retraining of derived architectures, and the
(temperature, Monte Carlo width) ablation grid."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .architecture import DerivedArchitecture
from .autodiff import Graph
from .data import Split, SyntheticBimodalDataset, make_synthetic_bimodal
from .seeding import derive_rng, derive_seed
from .supernet import DerivedNet, Supernet, SupernetConfig

log = logging.getLogger(__name__)

MOMENTUM = 0.9
GRAD_CLIP = 5.0
DEFAULT_LAMBDAS = (0.1, 0.5, 1.0)
DEFAULT_KS = (10, 100, 1000)
WEIGHT_LR = 0.01
ARCH_LR = 0.1
WARMUP_EPOCHS = 5
ADAPTIVE_WINDOW = 44  # two epochs of 1400 train rows at batch 64


class DivergenceError(RuntimeError):
    """Non-finite loss. ``trace`` holds the epochs completed before it."""

    def __init__(self, message: str, trace: Optional["SearchTrace"] = None):
        super().__init__(message)
        self.trace = trace


class SGD:
    """SGD with heavy-ball momentum over a dict of arrays (updated in place).

    Gradients are rescaled to a global L2 norm of at most ``clip``.
    """

    def __init__(self, lr: float, momentum: float = MOMENTUM, clip: Optional[float] = GRAD_CLIP):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        if self.lr == 0:
            return
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {n: g * (self.clip / norm) for n, g in grads.items()}
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    var_alpha: float
    var_gamma: float
    ent_alpha: float
    ent_gamma: float
    k_used: int


@dataclass
class SearchTrace:
    records: list[EpochRecord] = field(default_factory=list)
    decisions: list[tuple] = field(default_factory=list)
    k_schedule: list[int] = field(default_factory=list)
    conditional_samples: int = 0

    COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "var_alpha", "var_gamma",
               "ent_alpha", "ent_gamma", "k_used")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


class AdaptiveK:
    """Monte Carlo width driven by the measured alpha-gradient variance.

    Starts at ``k_min``. After every ``window`` architecture steps the
    variance of the window's alpha gradients is compared with ``target``:
    above it K doubles (capped at ``k_max``), below ``target / 4`` it halves
    (floored at ``k_min``).
    """

    def __init__(self, target: float, k_min: int, k_max: int, window: int):
        if not 1 <= k_min <= k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got {k_min}, {k_max}")
        if not target > 0:
            raise ValueError("variance target must be positive")
        if window < 2:
            raise ValueError("window must hold at least 2 batches")
        self.target = target
        self.k_min = k_min
        self.k_max = k_max
        self.window = window
        self.k = k_min
        self._grads: list[np.ndarray] = []

    def observe(self, alpha_grad: np.ndarray) -> int:
        self._grads.append(alpha_grad)
        if len(self._grads) >= self.window:
            var = total_variance(np.stack(self._grads))
            self._grads = []
            if var > self.target:
                self.k = min(2 * self.k, self.k_max)
            elif var < self.target / 4:
                self.k = max(self.k // 2, self.k_min)
        return self.k


def adaptive_k_schedule(variances: Sequence[float], target: float, k_min: int, k_max: int) -> list[int]:
    """K in force after each window, given one variance measurement per window."""
    ctl = AdaptiveK(target, k_min, k_max, window=2)
    out = []
    for var in variances:
        if var > ctl.target:
            ctl.k = min(2 * ctl.k, ctl.k_max)
        elif var < ctl.target / 4:
            ctl.k = max(ctl.k // 2, ctl.k_min)
        out.append(ctl.k)
    return out


def total_variance(samples: np.ndarray) -> float:
    if samples.shape[0] < 2:
        return 0.0
    return float(samples.var(axis=0, ddof=1).sum())


def _mean_entropy(rows) -> float:
    ent = []
    for row in rows:
        p = np.exp(row - row.max())
        p /= p.sum()
        nz = p[p > 0]
        ent.append(float(-(nz * np.log(nz)).sum()))
    return float(np.mean(ent))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate(net: Supernet, split: Split) -> tuple[float, float]:
    graph = Graph(net.config.seed)
    w_ids, a_ids, g_ids = net.bind(graph, weights_grad=False, arch_grad=False)
    logits = net.logits(graph, w_ids, net.mode_selection(graph, a_ids, g_ids), split.x1, split.x2)
    loss = float(graph.value(graph.cross_entropy(logits, split.y)))
    acc = float((np.argmax(graph.value(logits), axis=1) == split.y).mean())
    return loss, acc


def search(
    net: Supernet,
    dataset: SyntheticBimodalDataset,
    epochs: int,
    weight_lr: float = WEIGHT_LR,
    arch_lr: float = ARCH_LR,
    batch_size: int = 64,
    controller: Optional[AdaptiveK] = None,
    warmup_epochs: int = WARMUP_EPOCHS,
) -> tuple:
    """Alternate a weight step on a train batch and an architecture step on a
    val batch. Returns ``(ArchParams, SearchTrace)``; ``net`` is updated in place.

    During the first ``warmup_epochs`` the architecture gradients are still
    computed (and traced) but not applied.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    cfg = net.config
    data_rng = derive_rng(cfg.seed, "search-batches")
    noise_rng = derive_rng(cfg.seed, "search-gumbel")
    cond_rng = derive_rng(cfg.seed, "search-conditional")
    w_opt, a_opt = SGD(weight_lr), SGD(arch_lr)
    arch = {f"alpha{i}": a for i, a in enumerate(net.arch.alpha)}
    arch["gamma"] = net.arch.gamma
    trace = SearchTrace()
    val_batches: list = []
    k = controller.k if controller else cfg.k
    n_rows = 2 * cfg.num_nodes

    for epoch in range(1, epochs + 1):
        train_losses, a_grads, g_grads = [], [], []
        for idx in _batches(len(dataset.train), batch_size, data_rng):
            batch = dataset.train.batch(idx)
            graph = Graph(cfg.seed)
            w_ids, a_ids, g_ids = net.bind(graph, weights_grad=True, arch_grad=False)
            selection, _ = net.sample_selection(graph, a_ids, g_ids, noise_rng, cond_rng, k)
            loss = graph.cross_entropy(net.logits(graph, w_ids, selection, batch.x1, batch.x2), batch.y)
            loss_value = float(graph.value(loss))
            if not math.isfinite(loss_value):
                raise DivergenceError(f"non-finite train loss at epoch {epoch}", trace)
            train_losses.append(loss_value)
            if cfg.estimator == "grmc":
                trace.conditional_samples += k * n_rows
            graph.backward(loss)
            w_opt.step(net.weights, {n: graph.grad(i) for n, i in w_ids.items()})

            if not val_batches:
                val_batches = _batches(len(dataset.val), batch_size, data_rng)
            vbatch = dataset.val.batch(val_batches.pop(0))
            graph = Graph(cfg.seed)
            w_ids, a_ids, g_ids = net.bind(graph, weights_grad=False, arch_grad=True)
            selection, decisions = net.sample_selection(graph, a_ids, g_ids, noise_rng, cond_rng, k)
            loss = graph.cross_entropy(net.logits(graph, w_ids, selection, vbatch.x1, vbatch.x2), vbatch.y)
            if not math.isfinite(float(graph.value(loss))):
                raise DivergenceError(f"non-finite val loss at epoch {epoch}", trace)
            graph.backward(loss)
            grads = {f"alpha{i}": graph.grad(a)[0] for i, a in enumerate(a_ids)}
            grads["gamma"] = np.stack([graph.grad(g)[0] for g in g_ids])
            if epoch > warmup_epochs:
                a_opt.step(arch, grads)
            trace.decisions.append(tuple(decisions))
            if cfg.estimator == "grmc":
                trace.conditional_samples += k * n_rows
            alpha_grad = np.concatenate([grads[f"alpha{i}"] for i in range(cfg.num_nodes)])
            a_grads.append(alpha_grad)
            g_grads.append(grads["gamma"].ravel())
            if controller is not None:
                k = controller.observe(alpha_grad)

        val_loss, val_acc = evaluate(net, dataset.val)
        trace.k_schedule.append(k)
        trace.records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(train_losses)),
            val_loss=val_loss,
            val_acc=val_acc,
            var_alpha=total_variance(np.stack(a_grads)),
            var_gamma=total_variance(np.stack(g_grads)),
            ent_alpha=_mean_entropy(net.arch.alpha),
            ent_gamma=_mean_entropy(net.arch.gamma),
            k_used=int(k),
        ))
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite val loss at epoch {epoch}", trace)
    return net.arch.copy(), trace


def train_derived(
    arch: DerivedArchitecture,
    config: SupernetConfig,
    dataset: SyntheticBimodalDataset,
    epochs: int,
    weight_lr: float = WEIGHT_LR,
    batch_size: int = 64,
) -> tuple[DerivedNet, float]:
    net = DerivedNet(arch, config, config.seed)
    opt = SGD(weight_lr)
    rng = derive_rng(config.seed, "retrain-batches")
    for epoch in range(epochs):
        for idx in _batches(len(dataset.train), batch_size, rng):
            batch = dataset.train.batch(idx)
            graph = Graph(config.seed)
            w_ids = {n: graph.leaf(w, requires_grad=True) for n, w in net.weights.items()}
            loss = graph.cross_entropy(net.logits(graph, w_ids, batch.x1, batch.x2), batch.y)
            if not math.isfinite(float(graph.value(loss))):
                raise DivergenceError(f"non-finite loss while retraining (epoch {epoch + 1})")
            graph.backward(loss)
            opt.step(net.weights, {n: graph.grad(i) for n, i in w_ids.items()})
    return net, derived_accuracy(net, dataset.test)


def derived_accuracy(net: DerivedNet, split: Split) -> float:
    graph = Graph()
    w_ids = {n: graph.constant(w) for n, w in net.weights.items()}
    logits = graph.value(net.logits(graph, w_ids, split.x1, split.x2))
    return float((np.argmax(logits, axis=1) == split.y).mean())


def retrain_derived(arch: DerivedArchitecture, config: SupernetConfig, dataset: SyntheticBimodalDataset,
                    epochs: int, weight_lr: float = WEIGHT_LR) -> float:
    """Fresh weights, same optimizer; returns held-out test accuracy."""
    return train_derived(arch, config, dataset, epochs, weight_lr)[1]


# -- ablation --------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    lam: float
    k: int
    seed: int
    retrain_acc: float
    var_alpha: float
    wall_ms: float
    dot: str
    failure: str = ""


@dataclass(frozen=True)
class AblationJob:
    base: SupernetConfig
    lam: float
    k: int
    seed: int
    cell_seed: int
    epochs: int
    retrain_epochs: int
    n: int
    weight_lr: float
    arch_lr: float
    warmup_epochs: int = WARMUP_EPOCHS


def run_cell(job: AblationJob) -> AblationCell:
    t0 = time.perf_counter()
    try:
        dataset = make_synthetic_bimodal(job.seed, n=job.n, d1=job.base.modality_dims[0], d2=job.base.modality_dims[1])
        cfg = job.base.with_(lam=job.lam, k=job.k, seed=job.cell_seed)
        net = Supernet(cfg)
        _, trace = search(net, dataset, job.epochs, job.weight_lr, job.arch_lr,
                          warmup_epochs=job.warmup_epochs)
        arch = net.derive({"lambda": job.lam, "K": job.k, "estimator": cfg.estimator, "seed": job.seed})
        acc = retrain_derived(arch, cfg, dataset, job.retrain_epochs, job.weight_lr)
        var_alpha = float(trace.column("var_alpha").mean())
        wall = (time.perf_counter() - t0) * 1e3
        return AblationCell(job.lam, job.k, job.seed, acc, var_alpha, wall, arch.to_dot())
    except Exception as exc:  # recorded per cell; the grid continues
        log.warning("ablation cell lambda=%s k=%s seed=%s failed: %s", job.lam, job.k, job.seed, exc)
        wall = (time.perf_counter() - t0) * 1e3
        return AblationCell(job.lam, job.k, job.seed, math.nan, math.nan, wall, "", f"{type(exc).__name__}: {exc}")


def ablation_jobs(base: SupernetConfig, lambdas: Sequence[float], ks: Sequence[int], seeds: Sequence[int],
                  master_seed: int, epochs: int, retrain_epochs: int, n: int = 2000,
                  weight_lr: float = WEIGHT_LR, arch_lr: float = ARCH_LR,
                  warmup_epochs: int = WARMUP_EPOCHS) -> list[AblationJob]:
    if not lambdas or not ks or not seeds:
        raise ValueError("ablation grids must be non-empty")
    return [
        AblationJob(base, float(lam), int(k), int(seed), derive_seed(master_seed, li, ki, si),
                    epochs, retrain_epochs, n, weight_lr, arch_lr, warmup_epochs)
        for li, lam in enumerate(lambdas)
        for ki, k in enumerate(ks)
        for si, seed in enumerate(seeds)
    ]


def ablate(base: SupernetConfig, lambdas: Sequence[float] = DEFAULT_LAMBDAS, ks: Sequence[int] = DEFAULT_KS,
           seeds: Sequence[int] = (0, 1, 2, 3, 4), master_seed: int = 0, epochs: int = 30,
           retrain_epochs: int = 20, n: int = 2000, workers: int = 1,
           weight_lr: float = WEIGHT_LR, arch_lr: float = ARCH_LR,
           warmup_epochs: int = WARMUP_EPOCHS) -> list[AblationCell]:
    jobs = ablation_jobs(base, lambdas, ks, seeds, master_seed, epochs, retrain_epochs, n,
                         weight_lr, arch_lr, warmup_epochs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run_cell, jobs))
    else:
        cells = [run_cell(job) for job in jobs]
    return sorted(cells, key=lambda c: (c.lam, c.k, c.seed))
