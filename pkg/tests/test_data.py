import numpy as np
import pytest

from gumbelnas.data import NOISE_SIGMA, make_synthetic_bimodal


@pytest.fixture(scope="module")
def ds():
    return make_synthetic_bimodal(0)


def test_split_sizes(ds):
    assert (len(ds.train), len(ds.val), len(ds.test)) == (1400, 300, 300)
    assert ds.dims == (8, 8)


def test_splits_are_disjoint(ds):
    rows = [np.hstack([s.x1, s.x2]) for s in (ds.train, ds.val, ds.test)]
    keys = [set(map(bytes, r)) for r in rows]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])


def test_label_is_xor_of_latents(ds):
    y = np.concatenate([ds.train.y, ds.val.y, ds.test.y])
    assert np.mean((ds.latents[:, 0] ^ ds.latents[:, 1]) == y) == 1.0


def test_each_modality_encodes_its_bit(ds):
    # the sign of the projection onto the class-mean difference recovers the bit
    n_train = len(ds.train)
    for x, bit in ((ds.train.x1, ds.latents[:n_train, 0]), (ds.train.x2, ds.latents[:n_train, 1])):
        direction = x[bit == 1].mean(axis=0) - x[bit == 0].mean(axis=0)
        assert np.mean((x @ direction > 0) == bit) > 0.95


def test_single_modality_probe_bound(ds):
    assert max(ds.probe_accuracy) <= 0.60


def test_single_modality_nearest_centroid_is_chance(ds):
    # an independent classifier: nearest class centroid per modality
    for xtr, xva in ((ds.train.x1, ds.val.x1), (ds.train.x2, ds.val.x2)):
        c0, c1 = xtr[ds.train.y == 0].mean(axis=0), xtr[ds.train.y == 1].mean(axis=0)
        pred = np.linalg.norm(xva - c1, axis=1) < np.linalg.norm(xva - c0, axis=1)
        assert np.mean(pred == ds.val.y) <= 0.60


def test_noise_level(ds):
    n_train = len(ds.train)
    a = ds.latents[:n_train, 0]
    x = ds.train.x1
    resid = np.concatenate([x[a == 1] - x[a == 1].mean(axis=0), x[a == 0] - x[a == 0].mean(axis=0)])
    assert resid.std() == pytest.approx(NOISE_SIGMA, rel=0.05)


def test_deterministic():
    a, b = make_synthetic_bimodal(3, n=1000), make_synthetic_bimodal(3, n=1000)
    for s, t in zip((a.train, a.val, a.test), (b.train, b.val, b.test)):
        assert s.x1.tobytes() == t.x1.tobytes() and s.x2.tobytes() == t.x2.tobytes()
        assert np.array_equal(s.y, t.y)
    assert not np.array_equal(make_synthetic_bimodal(4, n=1000).train.x1, a.train.x1)


@pytest.mark.parametrize("kwargs", [{"n": 999}, {"d1": 0}, {"d2": -1}])
def test_degenerate_arguments(kwargs):
    with pytest.raises(ValueError):
        make_synthetic_bimodal(0, **kwargs)
