import math

import numpy as np
import pytest

from gumbelnas.architecture import ArchNode, DerivedArchitecture
from gumbelnas.data import make_synthetic_bimodal
from gumbelnas.search import (
    SGD,
    AdaptiveK,
    DivergenceError,
    SearchTrace,
    ablate,
    ablation_jobs,
    adaptive_k_schedule,
    retrain_derived,
    run_cell,
    search,
    total_variance,
)
from gumbelnas.supernet import Supernet, SupernetConfig


@pytest.fixture(scope="module")
def small():
    return make_synthetic_bimodal(0, n=1000)


# -- optimizer -----------------------------------------------------------------


def test_sgd_momentum_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    opt = SGD(0.1, momentum=0.9, clip=None)
    opt.step(p, {"w": np.array([1.0, 1.0])})
    np.testing.assert_allclose(p["w"], [0.9, -2.1])
    opt.step(p, {"w": np.array([0.0, 2.0])})
    # v = 0.9 * [1, 1] + [0, 2] = [0.9, 2.9]
    np.testing.assert_allclose(p["w"], [0.81, -2.39])


def test_sgd_clips_global_norm():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    SGD(1.0, clip=5.0).step(p, {"a": np.array([30.0]), "b": np.array([40.0])})
    np.testing.assert_allclose([p["a"][0], p["b"][0]], [-3.0, -4.0])


def test_total_variance_is_trace():
    x = np.random.default_rng(0).normal(size=(50, 4))
    assert total_variance(x) == pytest.approx(np.trace(np.cov(x.T)))
    assert total_variance(x[:1]) == 0.0


# -- search ----------------------------------------------------------------------


def test_zero_arch_lr_freezes_arch(small):
    net = Supernet(SupernetConfig(seed=1))
    net.arch.alpha[1][:] = [0.3, -0.2, 0.1]
    before = net.arch.copy()
    arch, trace = search(net, small, 3, arch_lr=0.0, warmup_epochs=0)
    for a, b in zip(arch.alpha, before.alpha):
        assert np.array_equal(a, b)
    assert np.array_equal(arch.gamma, before.gamma)
    assert len(trace.records) == 3


def test_trace_records(small):
    _, trace = search(Supernet(SupernetConfig(seed=2, k=10)), small, 4, warmup_epochs=1)
    assert [r.epoch for r in trace.records] == [1, 2, 3, 4]
    assert np.all(trace.column("ent_alpha") >= 0) and np.all(trace.column("ent_gamma") >= 0)
    assert np.all(trace.column("var_alpha") >= 0)
    assert list(trace.column("k_used")) == [10] * 4
    assert SearchTrace.COLUMNS == ("epoch", "train_loss", "val_loss", "val_acc", "var_alpha", "var_gamma",
                                   "ent_alpha", "ent_gamma", "k_used")


def test_search_deterministic(small):
    runs = []
    for _ in range(2):
        net = Supernet(SupernetConfig(seed=4, k=10))
        arch, trace = search(net, small, 2)
        runs.append((arch.flat_alpha().tobytes(), arch.gamma.tobytes(),
                     [tuple(vars(r).values()) for r in trace.records], trace.decisions))
    assert runs[0] == runs[1]


def test_hard_decisions_coincide_across_estimators(small):
    # architecture frozen so the only difference is the estimator tag
    decisions = {}
    for est in ("gs", "stgs", "grmc"):
        net = Supernet(SupernetConfig(seed=6, estimator=est, k=10))
        net.arch.gamma[:, 3] = 0.5
        _, trace = search(net, small, 2, arch_lr=0.0, warmup_epochs=0)
        decisions[est] = trace.decisions
    assert decisions["stgs"] == decisions["grmc"] == decisions["gs"]
    assert len(decisions["grmc"]) > 0


def test_divergence_aborts_with_trace(small):
    net = Supernet(SupernetConfig(seed=0))
    net.weights["head.w"][:] = 1e308
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
        search(net, small, 3)
    assert isinstance(info.value.trace, SearchTrace)


def test_epochs_must_be_positive(small):
    with pytest.raises(ValueError):
        search(Supernet(SupernetConfig()), small, 0)


def test_conditional_sample_accounting(small):
    _, trace = search(Supernet(SupernetConfig(seed=3, k=7)), small, 1)
    steps = math.ceil(len(small.train) / 64)
    # two selections per node, on both the weight and the architecture step
    assert trace.conditional_samples == 2 * steps * 7 * 2 * 3
    _, trace = search(Supernet(SupernetConfig(seed=3, estimator="stgs")), small, 1)
    assert trace.conditional_samples == 0


# -- adaptive K --------------------------------------------------------------------


def test_adaptive_k_floor_when_variance_low():
    ctl = AdaptiveK(target=1.0, k_min=4, k_max=64, window=3)
    rng = np.random.default_rng(0)
    ks = [ctl.observe(1e-3 * rng.normal(size=5)) for _ in range(30)]
    assert set(ks) == {4}


def test_adaptive_k_infinite_target_collapses_to_min():
    ctl = AdaptiveK(target=math.inf, k_min=2, k_max=64, window=2)
    ks = [ctl.observe(np.full(3, float(i))) for i in range(10)]
    assert ks == [2] * 10
    assert adaptive_k_schedule([5.0, 1.0, 0.0], math.inf, 3, 100) == [3, 3, 3]


def test_adaptive_k_doubles_and_halves():
    assert adaptive_k_schedule([10, 10, 10, 10, 0.1, 0.1, 0.5], 1.0, 8, 40) == [16, 32, 40, 40, 20, 10, 10]


@pytest.mark.parametrize("args", [(1.0, 0, 5, 4), (1.0, 6, 5, 4), (0.0, 1, 5, 4), (1.0, 1, 5, 1)])
def test_adaptive_k_rejects(args):
    with pytest.raises(ValueError):
        AdaptiveK(*args)


def test_adaptive_controller_drives_search(small):
    ctl = AdaptiveK(target=1e-12, k_min=2, k_max=16, window=4)
    _, trace = search(Supernet(SupernetConfig(seed=5)), small, 2, controller=ctl)
    assert trace.k_schedule[-1] == 16
    assert list(trace.column("k_used")) == trace.k_schedule


# -- retraining ----------------------------------------------------------------------


def _arch(*fusion):
    stems = (ArchNode(0, "audio_stem", ()), ArchNode(1, "visual_stem", ()))
    used = {i for n in fusion for i in n.inputs}
    return DerivedArchitecture(tuple(s for s in stems if s.id in used) + tuple(fusion), fusion[-1].id)


def test_skip_only_cannot_solve_xor():
    ds = make_synthetic_bimodal(1)
    acc = retrain_derived(_arch(ArchNode(2, "skip", (0,))), SupernetConfig(seed=1), ds, 20)
    assert acc <= 0.60


def test_hadamard_of_both_stems_solves_xor():
    ds = make_synthetic_bimodal(1)
    acc = retrain_derived(_arch(ArchNode(2, "hadamard", (1, 0))), SupernetConfig(seed=1), ds, 20)
    assert acc >= 0.95


def test_retrain_deterministic(small):
    arch = _arch(ArchNode(2, "sum", (1, 0)), ArchNode(3, "hadamard", (2, 0)))
    cfg = SupernetConfig(seed=2)
    assert retrain_derived(arch, cfg, small, 3) == retrain_derived(arch, cfg, small, 3)


# -- ablation ------------------------------------------------------------------------


def test_default_grid_has_nine_cells():
    jobs = ablation_jobs(SupernetConfig(), (0.1, 0.5, 1.0), (10, 100, 1000), [0], 0, 1, 1)
    assert sorted({(j.lam, j.k) for j in jobs}) == [(lam, k) for lam in (0.1, 0.5, 1.0) for k in (10, 100, 1000)]
    assert len({j.cell_seed for j in jobs}) == 9


def test_ablation_grid_must_be_non_empty():
    with pytest.raises(ValueError):
        ablate(SupernetConfig(), [], [10], [0])


def test_ablation_records_failures_and_continues(monkeypatch):
    import gumbelnas.search as search_mod

    real = search_mod.search

    def flaky(net, *args, **kwargs):
        if net.config.k == 3:
            raise DivergenceError("forced")
        return real(net, *args, **kwargs)

    monkeypatch.setattr(search_mod, "search", flaky)
    cells = ablate(SupernetConfig(), [0.5], [2, 3], [0], epochs=1, retrain_epochs=1, n=1000)
    assert [c.k for c in cells] == [2, 3]
    assert cells[0].failure == "" and cells[0].dot.startswith("digraph")
    assert "forced" in cells[1].failure and math.isnan(cells[1].retrain_acc)


def test_ablation_independent_of_workers_and_order():
    kw = dict(epochs=1, retrain_epochs=1, n=1000)
    serial = ablate(SupernetConfig(), [0.5, 1.0], [2], [0, 1], **kw)
    pooled = ablate(SupernetConfig(), [0.5, 1.0], [2], [0, 1], workers=2, **kw)
    strip = lambda cells: [(c.lam, c.k, c.seed, c.retrain_acc, c.var_alpha, c.dot) for c in cells]
    assert strip(serial) == strip(pooled)
    jobs = ablation_jobs(SupernetConfig(), [0.5, 1.0], [2], [0, 1], 0, 1, 1, 1000)
    reverse = sorted((run_cell(j) for j in reversed(jobs)), key=lambda c: (c.lam, c.k, c.seed))
    assert strip(reverse) == strip(serial)
