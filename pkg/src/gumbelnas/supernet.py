"""Two-stem fusion supernet with edge (alpha) and operation (gamma) logits.

Both stems are linear maps into ``hidden_dim``. Each fusion node combines its
chain input with one selected earlier state (see :mod:`.architecture` for the
id layout) through a mixture of candidate ops whose weights come from the
configured estimator. A linear head classifies the last node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .architecture import OPS, DerivedArchitecture, canonical_op, derive_architecture
from .autodiff import Graph
from .estimators import check_estimator, check_temperature, onehot, relaxed_softmax, select
from .seeding import derive_rng

MAX_NODES = 8
NUM_CLASSES = 2


@dataclass(frozen=True)
class SupernetConfig:
    modality_dims: tuple[int, int] = (8, 8)
    hidden_dim: int = 16
    num_nodes: int = 3
    candidate_ops: tuple[str, ...] = OPS
    estimator: str = "grmc"
    lam: float = 0.1
    k: int = 100
    seed: int = 0

    def __post_init__(self):
        ops = tuple(canonical_op(op) for op in self.candidate_ops)
        if not ops:
            raise ValueError("candidate_ops must be non-empty")
        if len(set(ops)) != len(ops):
            raise ValueError(f"duplicate candidate ops in {ops}")
        object.__setattr__(self, "candidate_ops", ops)
        object.__setattr__(self, "estimator", check_estimator(self.estimator))
        check_temperature(self.lam)
        if not 1 <= self.num_nodes <= MAX_NODES:
            raise ValueError(f"num_nodes must be in [1, {MAX_NODES}], got {self.num_nodes}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.hidden_dim < 1 or min(self.modality_dims) < 1:
            raise ValueError("dimensions must be positive")

    def with_(self, **changes) -> "SupernetConfig":
        return replace(self, **changes)


@dataclass
class ArchParams:
    """Edge logits (one row per node, ``2 + i`` entries) and op logits."""

    alpha: list[np.ndarray]
    gamma: np.ndarray

    @classmethod
    def zeros(cls, config: SupernetConfig) -> "ArchParams":
        return cls(
            [np.zeros(2 + i) for i in range(config.num_nodes)],
            np.zeros((config.num_nodes, len(config.candidate_ops))),
        )

    def copy(self) -> "ArchParams":
        return ArchParams([a.copy() for a in self.alpha], self.gamma.copy())

    def flat_alpha(self) -> np.ndarray:
        return np.concatenate(self.alpha)


# -- ops ------------------------------------------------------------------------


def _row_scalar_broadcast(graph: Graph, col: int, width: int) -> int:
    # (B, 1) -> (B, width)
    return graph.matmul(col, graph.constant(np.ones((1, width))))


def apply_op(graph: Graph, op: str, chain: int, selected: int, params: Optional[tuple[int, int]] = None) -> int:
    """Forward of one candidate op on ``(B, H)`` inputs."""
    batch, hidden = graph.shape(selected)
    if op == "zero":
        return graph.constant(np.zeros((batch, hidden)))
    if op == "skip":
        return selected
    if op == "sum":
        return graph.add(chain, selected)
    if op == "hadamard":
        # tanh keeps stacked products bounded; being odd it preserves sign products
        return graph.mul(graph.tanh(chain), graph.tanh(selected))
    if op == "concat_linear":
        w, b = params
        cat = graph.concat([chain, selected], axis=1)
        return graph.add(graph.matmul(cat, w), graph.repeat(b, batch, axis=0))
    if op == "scaled_dot_attention":
        # chain queries the two-token sequence (chain, selected)
        ones = graph.constant(np.ones((hidden, 1)))
        s_self = graph.matmul(graph.mul(chain, chain), ones)
        s_sel = graph.matmul(graph.mul(chain, selected), ones)
        scores = graph.scale(graph.concat([s_self, s_sel], axis=1), 1.0 / math.sqrt(hidden))
        attn = graph.softmax(scores, axis=1)
        w_self = graph.matmul(attn, graph.constant([[1.0], [0.0]]))
        w_sel = graph.matmul(attn, graph.constant([[0.0], [1.0]]))
        return graph.add(
            graph.mul(_row_scalar_broadcast(graph, w_self, hidden), chain),
            graph.mul(_row_scalar_broadcast(graph, w_sel, hidden), selected),
        )
    raise ValueError(f"unknown op {op!r}")


def mix(graph: Graph, weights: int, states: Sequence[int]) -> int:
    """``sum_j weights[j] * states[j]`` for a ``(1, n)`` weight row and ``(B, H)`` states."""
    shape = graph.shape(states[0])
    flat = graph.concat([graph.reshape(s, (1, shape[0] * shape[1])) for s in states], axis=0)
    return graph.reshape(graph.matmul(weights, flat), shape)


def linear(graph: Graph, x: int, w: int, b: int) -> int:
    return graph.add(graph.matmul(x, w), graph.repeat(b, graph.shape(x)[0], axis=0))


def init_weights(config: SupernetConfig, rng: np.random.Generator, op_nodes: Optional[Sequence[int]] = None) -> dict[str, np.ndarray]:
    """Stems, per-node concat-linear weights and head. Biases start at zero."""
    d1, d2 = config.modality_dims
    h = config.hidden_dim

    def dense(fan_in, fan_out):
        return rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    weights = {
        "stem0.w": dense(d1, h), "stem0.b": np.zeros((1, h)),
        "stem1.w": dense(d2, h), "stem1.b": np.zeros((1, h)),
    }
    nodes = range(config.num_nodes) if op_nodes is None else op_nodes
    if "concat_linear" in config.candidate_ops:
        for i in nodes:
            weights[f"node{i}.w"] = dense(2 * h, h)
            weights[f"node{i}.b"] = np.zeros((1, h))
    weights["head.w"] = dense(h, NUM_CLASSES)
    weights["head.b"] = np.zeros((1, NUM_CLASSES))
    return weights


class Supernet:
    def __init__(self, config: SupernetConfig):
        self.config = config
        self.weights = init_weights(config, derive_rng(config.seed, "supernet-weights"))
        self.arch = ArchParams.zeros(config)

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())

    # -- graph construction ---------------------------------------------------

    def bind(self, graph: Graph, *, weights_grad: bool, arch_grad: bool):
        w_ids = {name: graph.leaf(w, requires_grad=weights_grad) for name, w in self.weights.items()}
        a_ids = [graph.leaf(a[None, :], requires_grad=arch_grad) for a in self.arch.alpha]
        g_ids = [graph.leaf(self.arch.gamma[i][None, :], requires_grad=arch_grad)
                 for i in range(self.config.num_nodes)]
        return w_ids, a_ids, g_ids

    def sample_selection(self, graph, a_ids, g_ids, rng, cond_rng, k=None):
        """Estimator-driven ``(1, n)`` weight rows for every alpha and gamma row.

        Rows are drawn node by node, alpha before gamma, so the unconditional
        noise sequence is the same for every estimator.
        """
        cfg = self.config
        k = cfg.k if k is None else k
        selection, decisions = [], []
        for a_id, g_id in zip(a_ids, g_ids):
            a_sel, a_idx = select(graph, a_id, cfg.estimator, cfg.lam, k, rng, cond_rng)
            g_sel, g_idx = select(graph, g_id, cfg.estimator, cfg.lam, k, rng, cond_rng)
            selection.append((a_sel, g_sel))
            decisions.append((int(a_idx[0]), int(g_idx[0])))
        return selection, decisions

    def mode_selection(self, graph, a_ids, g_ids):
        """Noise-free selection used for evaluation: argmax one-hots for the
        straight-through estimators, ``softmax(logits / lam)`` for plain GS."""
        out = []
        for a_id, g_id in zip(a_ids, g_ids):
            pair = []
            for lid in (a_id, g_id):
                logits = graph.value(lid)
                if self.config.estimator == "gs":
                    pair.append(graph.constant(relaxed_softmax(logits, self.config.lam)))
                else:
                    pair.append(graph.constant(onehot(np.argmax(logits, axis=-1), logits.shape[-1])))
            out.append(tuple(pair))
        return out

    def logits(self, graph: Graph, w_ids: dict, selection, x1, x2) -> int:
        cfg = self.config
        s0 = linear(graph, graph.constant(x1), w_ids["stem0.w"], w_ids["stem0.b"])
        s1 = linear(graph, graph.constant(x2), w_ids["stem1.w"], w_ids["stem1.b"])
        states = [s0, s1]
        for i, (a_sel, g_sel) in enumerate(selection):
            chain = states[-1]
            chosen = mix(graph, a_sel, states)
            outs = []
            for op in cfg.candidate_ops:
                params = (w_ids[f"node{i}.w"], w_ids[f"node{i}.b"]) if op == "concat_linear" else None
                outs.append(apply_op(graph, op, chain, chosen, params))
            states.append(mix(graph, g_sel, outs))
        return linear(graph, states[-1], w_ids["head.w"], w_ids["head.b"])

    def derive(self, meta=None) -> DerivedArchitecture:
        return derive_architecture(self.arch.alpha, self.arch.gamma, self.config.candidate_ops, meta)


def build_supernet(config: SupernetConfig) -> Supernet:
    return Supernet(config)


def parameter_count(config: SupernetConfig) -> int:
    """Closed-form weight count of :func:`build_supernet`."""
    (d1, d2), h = config.modality_dims, config.hidden_dim
    count = (d1 + 1) * h + (d2 + 1) * h + (h + 1) * NUM_CLASSES
    if "concat_linear" in config.candidate_ops:
        count += config.num_nodes * (2 * h + 1) * h
    return count


class DerivedNet:
    """Fixed network realizing a :class:`DerivedArchitecture`; no architecture parameters."""

    def __init__(self, arch: DerivedArchitecture, config: SupernetConfig, seed: int):
        self.arch = arch
        self.config = config
        linear_nodes = [n.id - 2 for n in arch.fusion_nodes() if n.op == "concat_linear"]
        cfg = config.with_(candidate_ops=config.candidate_ops if linear_nodes else ("skip",))
        self.weights = init_weights(cfg, derive_rng(seed, "retrain-weights"), linear_nodes)

    def logits(self, graph: Graph, w_ids: dict, x1, x2) -> int:
        states = {}
        for node in self.arch.nodes:
            if node.op == "audio_stem":
                states[node.id] = linear(graph, graph.constant(x1), w_ids["stem0.w"], w_ids["stem0.b"])
            elif node.op == "visual_stem":
                states[node.id] = linear(graph, graph.constant(x2), w_ids["stem1.w"], w_ids["stem1.b"])
            else:
                i = node.id - 2
                ins = [states[j] for j in node.inputs]
                params = (w_ids[f"node{i}.w"], w_ids[f"node{i}.b"]) if node.op == "concat_linear" else None
                if node.op == "zero":
                    shape = (np.asarray(x1).shape[0], self.config.hidden_dim)
                    states[node.id] = graph.constant(np.zeros(shape))
                elif node.op == "skip":
                    states[node.id] = ins[0]
                else:
                    states[node.id] = apply_op(graph, node.op, ins[0], ins[1], params)
        return linear(graph, states[self.arch.head], w_ids["head.w"], w_ids["head.b"])
