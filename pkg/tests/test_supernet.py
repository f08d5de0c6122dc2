import math

import numpy as np
import pytest

from gumbelnas.architecture import OPS, ArchNode, DerivedArchitecture
from gumbelnas.autodiff import Graph, gradcheck
from gumbelnas.estimators import onehot
from gumbelnas.supernet import (
    DerivedNet,
    Supernet,
    SupernetConfig,
    apply_op,
    build_supernet,
    parameter_count,
)


def _batch(seed=0, b=16, d=(8, 8)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, d[0])), rng.normal(size=(b, d[1])), rng.integers(0, 2, size=b)


def _fixed_selection(g, net, edges, ops, arch_grad=False):
    """One-hot selection rows for the given per-node edges and op names."""
    cfg = net.config
    sel = []
    for i, (e, op) in enumerate(zip(edges, ops)):
        a = g.leaf(onehot(e, 2 + i)[None, :], requires_grad=arch_grad)
        o = g.leaf(onehot(cfg.candidate_ops.index(op), len(cfg.candidate_ops))[None, :], requires_grad=arch_grad)
        sel.append((a, o))
    return sel


# -- config --------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"candidate_ops": ()},
    {"candidate_ops": ("skip", "skip")},
    {"candidate_ops": ("skip", "conv")},
    {"num_nodes": 9},
    {"num_nodes": 0},
    {"k": 0},
    {"lam": 0.0},
    {"lam": 20.0},
    {"estimator": "reinforce"},
    {"hidden_dim": 0},
])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        SupernetConfig(**kwargs)


def test_config_accepts_hyphenated_ops():
    cfg = SupernetConfig(candidate_ops=("skip", "concat-linear"))
    assert cfg.candidate_ops == ("skip", "concat_linear")


# -- forward -------------------------------------------------------------------


@pytest.mark.parametrize("op", OPS)
def test_one_hot_mixture_equals_single_op(op):
    net = build_supernet(SupernetConfig(seed=1))
    x1, x2, _ = _batch(1)
    g = Graph()
    w_ids, _, _ = net.bind(g, weights_grad=False, arch_grad=False)
    mixed = g.value(net.logits(g, w_ids, _fixed_selection(g, net, [0, 2, 1], [op, "sum", "hadamard"]), x1, x2))

    # hand-built single path through the same weights
    h = Graph()
    w = {n: h.constant(v) for n, v in net.weights.items()}

    def lin(x, name):
        return h.add(h.matmul(h.constant(x), w[f"{name}.w"]), h.repeat(w[f"{name}.b"], x.shape[0], axis=0))

    s0, s1 = lin(x1, "stem0"), lin(x2, "stem1")
    params = (w["node0.w"], w["node0.b"])
    n2 = apply_op(h, op, s1, s0, params)
    n3 = apply_op(h, "sum", n2, n2)
    n4 = apply_op(h, "hadamard", n3, s1)
    single = h.value(h.add(h.matmul(n4, w["head.w"]), h.repeat(w["head.b"], x1.shape[0], axis=0)))
    assert np.max(np.abs(mixed - single)) < 1e-10


def test_skip_only_single_node_is_linear_model():
    cfg = SupernetConfig(candidate_ops=("skip",), num_nodes=1, seed=3)
    net = Supernet(cfg)
    x1, x2, _ = _batch(3)
    W = net.weights
    for edge, x, stem in ((0, x1, "stem0"), (1, x2, "stem1")):
        g = Graph()
        w_ids, _, _ = net.bind(g, weights_grad=False, arch_grad=False)
        out = g.value(net.logits(g, w_ids, _fixed_selection(g, net, [edge], ["skip"]), x1, x2))
        expected = (x @ W[f"{stem}.w"] + W[f"{stem}.b"]) @ W["head.w"] + W["head.b"]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_zero_everywhere_gives_log2_and_zero_alpha_grads():
    net = Supernet(SupernetConfig(seed=2))
    x1, x2, _ = _batch(2, b=32)
    y = np.array([0, 1] * 16)
    g = Graph()
    w_ids, _, _ = net.bind(g, weights_grad=True, arch_grad=False)
    sel = _fixed_selection(g, net, [1, 2, 3], ["zero"] * 3, arch_grad=True)
    loss = g.cross_entropy(net.logits(g, w_ids, sel, x1, x2), y)
    assert float(g.value(loss)) == pytest.approx(math.log(2.0), abs=1e-15)
    g.backward(loss)
    for a, _ in sel:
        assert np.all(g.grad(a) == 0.0)


def test_zero_everywhere_with_sampled_estimator_rows():
    cfg = SupernetConfig(seed=5)
    net = Supernet(cfg)
    net.arch.gamma[:, OPS.index("zero")] = 40.0
    x1, x2, _ = _batch(5)
    y = np.array([0, 1] * 8)
    for est in ("stgs", "grmc"):
        net.config = cfg.with_(estimator=est, k=20)
        g = Graph()
        w_ids, a_ids, g_ids = net.bind(g, weights_grad=False, arch_grad=True)
        sel, decisions = net.sample_selection(g, a_ids, g_ids, np.random.default_rng(0), np.random.default_rng(1))
        assert all(op == 0 for _, op in decisions)
        loss = g.cross_entropy(net.logits(g, w_ids, sel, x1, x2), y)
        g.backward(loss)
        for a in a_ids:
            assert np.all(g.grad(a) == 0.0)


@pytest.mark.parametrize("cfg", [
    SupernetConfig(),
    SupernetConfig(candidate_ops=("zero", "skip", "sum")),
    SupernetConfig(modality_dims=(5, 11), hidden_dim=7, num_nodes=5),
    SupernetConfig(candidate_ops=("concat_linear",), num_nodes=2, hidden_dim=4),
])
def test_parameter_count_closed_form(cfg):
    net = build_supernet(cfg)
    assert net.num_parameters() == parameter_count(cfg)
    assert net.num_parameters() == sum(int(np.prod(v.shape)) for v in net.weights.values())


def test_weight_gradients_pass_gradcheck():
    net = Supernet(SupernetConfig(hidden_dim=4, seed=4, modality_dims=(3, 3)))
    x1, x2, y = _batch(4, b=6, d=(3, 3))
    names = sorted(net.weights)
    shapes = [net.weights[n].shape for n in names]
    flat0 = np.concatenate([net.weights[n].ravel() for n in names])

    for ops in (["hadamard", "scaled_dot_attention", "concat_linear"], ["sum", "skip", "hadamard"]):
        def fn(g, xid):
            w, off = {}, 0
            for n, shp in zip(names, shapes):
                size = int(np.prod(shp))
                w[n] = g.reshape(g.matmul(g.constant(np.eye(flat0.size)[off:off + size]), g.reshape(xid, (flat0.size, 1))), shp)
                off += size
            return g.cross_entropy(net.logits(g, w, _fixed_selection(g, net, [0, 1, 2], ops), x1, x2), y)

        assert gradcheck(fn, flat0) < 1e-5


def test_arch_gradients_match_relaxed_finite_differences():
    # with plain GS and fixed noise the architecture gradient is a true derivative
    cfg = SupernetConfig(estimator="gs", lam=1.0, hidden_dim=4, modality_dims=(3, 3), num_nodes=2, seed=7)
    net = Supernet(cfg)
    x1, x2, y = _batch(7, b=6, d=(3, 3))
    gamma0 = np.random.default_rng(0).normal(size=len(OPS))

    def fn(g, gid):
        w_ids, a_ids, g_ids = net.bind(g, weights_grad=False, arch_grad=False)
        sel = [(g.softmax(a_ids[0]), g.softmax(g.reshape(gid, (1, len(OPS))))),
               (g.softmax(a_ids[1]), g.softmax(g_ids[1]))]
        return g.cross_entropy(net.logits(g, w_ids, sel, x1, x2), y)

    assert gradcheck(fn, gamma0) < 1e-5


def test_mode_selection_is_argmax():
    net = Supernet(SupernetConfig(estimator="stgs"))
    net.arch.gamma[0, 3] = 2.0
    net.arch.alpha[1][2] = 1.0
    g = Graph()
    _, a_ids, g_ids = net.bind(g, weights_grad=False, arch_grad=False)
    sel = net.mode_selection(g, a_ids, g_ids)
    np.testing.assert_array_equal(g.value(sel[0][1]), onehot(3, len(OPS))[None, :])
    np.testing.assert_array_equal(g.value(sel[1][0]), onehot(2, 3)[None, :])


# -- derived net ------------------------------------------------------------------


def test_derived_net_matches_supernet_path():
    cfg = SupernetConfig(seed=9)
    arch = DerivedArchitecture((
        ArchNode(0, "audio_stem", ()), ArchNode(1, "visual_stem", ()),
        ArchNode(2, "concat_linear", (1, 0)), ArchNode(3, "skip", (2,)),
        ArchNode(4, "scaled_dot_attention", (3, 1)),
    ), 4)
    dnet = DerivedNet(arch, cfg, seed=9)
    assert set(dnet.weights) == {"stem0.w", "stem0.b", "stem1.w", "stem1.b", "node0.w", "node0.b", "head.w", "head.b"}
    net = Supernet(cfg)
    for name, value in dnet.weights.items():
        net.weights[name] = value
    x1, x2, _ = _batch(9)
    g = Graph()
    w_ids = {n: g.constant(v) for n, v in dnet.weights.items()}
    derived = g.value(dnet.logits(g, w_ids, x1, x2))
    sw, _, _ = net.bind(g, weights_grad=False, arch_grad=False)
    full = g.value(net.logits(g, sw, _fixed_selection(g, net, [0, 2, 1], ["concat_linear", "skip", "scaled_dot_attention"]), x1, x2))
    np.testing.assert_allclose(derived, full, rtol=1e-12, atol=1e-12)
