"""Discrete fusion DAGs and their JSON / DOT serializations.

State ids: ``0`` is the audio stem, ``1`` the visual stem, and fusion node
``i`` has id ``2 + i``. Node ``i`` has two input slots: a fixed *chain* input
(the state just before it, id ``1 + i``) and one *selected* input chosen by
its edge logits among all earlier states. ``inputs`` lists only the states an
op actually reads: ``[]`` for zero, ``[selected]`` for skip and
``[chain, selected]`` for the binary fusion ops.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

OPS = ("zero", "skip", "sum", "hadamard", "concat_linear", "scaled_dot_attention")
BINARY_OPS = ("sum", "hadamard", "concat_linear", "scaled_dot_attention")
STEM_OPS = ("audio_stem", "visual_stem")

_ALIASES = {"concat-linear": "concat_linear", "scaled-dot-attention": "scaled_dot_attention"}


def canonical_op(tag: str) -> str:
    tag = _ALIASES.get(tag, tag)
    if tag not in OPS:
        raise ValueError(f"unknown op {tag!r}; expected one of {OPS}")
    return tag


def op_inputs(op: str, chain: int, selected: int) -> list[int]:
    if op == "zero":
        return []
    if op == "skip":
        return [selected]
    return [chain, selected]


@dataclass(frozen=True)
class ArchNode:
    id: int
    op: str
    inputs: tuple[int, ...]


@dataclass(frozen=True)
class DerivedArchitecture:
    nodes: tuple[ArchNode, ...]
    head: int
    meta: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        seen = set()
        for node in self.nodes:
            if any(i not in seen for i in node.inputs):
                raise ValueError(f"node {node.id} reads a state that does not precede it")
            seen.add(node.id)
        if self.head not in seen:
            raise ValueError(f"head {self.head} is not a node")

    @property
    def order(self) -> list[int]:
        return [n.id for n in self.nodes]

    def node(self, node_id: int) -> ArchNode:
        return next(n for n in self.nodes if n.id == node_id)

    def fusion_nodes(self) -> list[ArchNode]:
        return [n for n in self.nodes if n.op not in STEM_OPS]

    # -- JSON ----------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "op": n.op, "inputs": list(n.inputs)} for n in self.nodes],
            "head": self.head,
            "meta": dict(self.meta),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "DerivedArchitecture":
        nodes = tuple(ArchNode(int(n["id"]), str(n["op"]), tuple(int(i) for i in n["inputs"]))
                      for n in data["nodes"])
        return cls(nodes, int(data["head"]), dict(data.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "DerivedArchitecture":
        return cls.from_dict(json.loads(text))

    # -- DOT -----------------------------------------------------------------

    def to_dot(self) -> str:
        lines = ["digraph architecture {", "  rankdir=LR;"]
        for key in sorted(self.meta):
            lines.append(f"  graph [{key}={json.dumps(json.dumps(self.meta[key]))}];")
        for n in self.nodes:
            lines.append(f'  n{n.id} [label="{n.op}"];')
        lines.append('  head [label="head", shape=box];')
        for n in self.nodes:
            for slot, src in enumerate(n.inputs):
                lines.append(f"  n{src} -> n{n.id} [slot={slot}];")
        lines.append(f"  n{self.head} -> head;")
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dot(cls, text: str) -> "DerivedArchitecture":
        """Parse the DOT subset written by :meth:`to_dot`."""
        meta = {}
        for key, raw in re.findall(r'graph \[(\w+)=("(?:[^"\\]|\\.)*")\];', text):
            meta[key] = json.loads(json.loads(raw))
        ops = {int(i): op for i, op in re.findall(r'n(\d+) \[label="(\w+)"\];', text)}
        inputs: dict[int, dict[int, int]] = {i: {} for i in ops}
        for src, dst, slot in re.findall(r"n(\d+) -> n(\d+) \[slot=(\d+)\];", text):
            inputs[int(dst)][int(slot)] = int(src)
        head = re.search(r"n(\d+) -> head;", text)
        if head is None:
            raise ValueError("DOT text has no head edge")
        nodes = tuple(
            ArchNode(i, ops[i], tuple(inputs[i][s] for s in sorted(inputs[i])))
            for i in ops
        )
        return cls(nodes, int(head.group(1)), meta)


def derive_architecture(alpha: Sequence[np.ndarray], gamma, ops: Sequence[str], meta=None) -> DerivedArchitecture:
    """Top-1 edge and top-1 op per node (ties to the lowest index), then prune
    everything the head cannot reach."""
    gamma = np.asarray(gamma)
    num_nodes = len(alpha)
    chosen = {}
    for i in range(num_nodes):
        edge = int(np.argmax(alpha[i]))
        op = ops[int(np.argmax(gamma[i]))]
        chosen[2 + i] = (op, op_inputs(op, 1 + i, edge))
    head = 1 + num_nodes
    reachable, stack = set(), [head]
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        if nid in chosen:
            stack.extend(chosen[nid][1])
    nodes = [ArchNode(i, STEM_OPS[i], ()) for i in (0, 1) if i in reachable]
    nodes += [ArchNode(nid, op, tuple(inp)) for nid, (op, inp) in sorted(chosen.items()) if nid in reachable]
    return DerivedArchitecture(tuple(nodes), head, dict(meta or {}))
