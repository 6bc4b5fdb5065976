import math

import numpy as np
import pytest
from scipy import special

from madp import datagen, graphgen
from madp.datagen import RegressionSpec
from madp.hypergraph import Hypergraph


@pytest.fixture(scope='module')
def regular_125k():
    return graphgen.gen_regular(graphgen.GraphGenSpec(125_000, seed=1))


def small_graph(n=2000, seed=0):
    return graphgen.gen_regular(graphgen.GraphGenSpec(n, seed=seed))


def test_beta_one_effective_vector_is_unscaled():
    ds = datagen.gen_regression(small_graph(), RegressionSpec(dim=7, bias_scale=1.0, seed=3))
    w = ds.effective_weights([1, 2, 5])
    for row, a in zip(w, [1, 2, 5]):
        np.testing.assert_array_equal(row, ds.base + a * ds.bias)


def test_effective_vector_general_beta():
    ds = datagen.gen_regression(small_graph(), RegressionSpec(dim=5, bias_scale=10.0, seed=3))
    np.testing.assert_allclose(ds.effective_weights(3)[0], 2 / 11 * (ds.base + 30 * ds.bias), rtol=1e-15)


def test_orthogonal_features_give_half():
    ds = datagen.gen_regression(small_graph(50), RegressionSpec(dim=3, seed=0))
    w = ds.effective_weights(ds.arity[0])[0]
    f = np.cross(w, [1.0, 0.0, 0.0])
    ds.features[0] = f.astype(np.float32)
    # float32 rounding leaves a tiny residual inner product.
    assert abs(ds.label_probability([0])[0] - 0.5) < 1e-6
    assert special.expit(0.0) == 0.5


@pytest.mark.parametrize('cov', ['sqrt', 'inv'])
def test_bayes_accuracy_strictly_between_half_and_one(regular_125k, cov):
    ds = datagen.gen_regression(regular_125k, RegressionSpec(dim=100, steepness=20, bias_scale=1, seed=1, cov=cov))
    test = ds.indices(datagen.TEST)
    pred = ds.label_probability(test) >= 0.5
    acc = np.mean(pred == (ds.labels[test] == 1))
    assert 0.5 < acc < 1.0


def test_split_sizes():
    assert datagen.split_sizes(10) == (8, 1, 1)
    assert datagen.split_sizes(0) == (0, 0, 0)
    assert datagen.split_sizes(125_000) == (100_000, 12_500, 12_500)
    assert datagen.split_sizes(19) == (17, 1, 1)


def test_split_dataset_partition_and_determinism():
    ds = datagen.gen_regression(small_graph(1234), RegressionSpec(dim=4, seed=2))
    counts = [len(ds.indices(s)) for s in (datagen.TRAIN, datagen.TEST, datagen.VALIDATION)]
    assert tuple(counts) == datagen.split_sizes(1234)
    again = datagen.split_dataset(ds, 2)
    np.testing.assert_array_equal(again.split, ds.split)
    other = datagen.split_dataset(ds, 3)
    assert (other.split != ds.split).any()


@pytest.mark.parametrize('cov, variance', [('sqrt', 100 ** -0.5), ('inv', 1 / 100)])
def test_coordinate_variance(cov, variance):
    ds = datagen.gen_regression(small_graph(10_000), RegressionSpec(dim=100, seed=4, cov=cov))
    f = ds.features.astype(float)
    # Sample variance of 10^6 Gaussian coordinates: relative SE sqrt(2 / N).
    rel_se = math.sqrt(2 / f.size)
    assert abs(f.var() / variance - 1) <= 3 * rel_se


def test_inv_covariance_gives_unit_squared_norm():
    ds = datagen.gen_regression(small_graph(10_000), RegressionSpec(dim=100, seed=4, cov='inv'))
    sq = np.sum(ds.features.astype(float) ** 2, axis=1)
    se = sq.std(ddof=1) / math.sqrt(len(sq))
    assert abs(sq.mean() - 1.0) <= 3 * se


def test_label_law():
    h = graphgen.gen_regular(graphgen.GraphGenSpec(100_000, seed=6))
    ds = datagen.gen_regression(h, RegressionSpec(dim=20, seed=6))
    p = ds.label_probability()
    z = (ds.labels.sum() - p.sum()) / math.sqrt(np.sum(p * (1 - p)))
    assert abs(z) <= 3
    # And per probability bucket.
    for lo, hi in [(0.0, 0.2), (0.4, 0.6), (0.8, 1.0)]:
        m = (p >= lo) & (p < hi)
        z = (ds.labels[m].sum() - p[m].sum()) / math.sqrt(np.sum(p[m] * (1 - p[m])))
        assert abs(z) <= 3.5


def test_determinism_and_seed_sensitivity():
    h = small_graph(500)
    a = datagen.gen_regression(h, RegressionSpec(dim=8, seed=1))
    b = datagen.gen_regression(h, RegressionSpec(dim=8, seed=1))
    c = datagen.gen_regression(h, RegressionSpec(dim=8, seed=2))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert (a.features != c.features).any()


def test_file_round_trip(tmp_path):
    ds = datagen.gen_regression(small_graph(300), RegressionSpec(dim=6, seed=5))
    p = tmp_path / 'd.bin'
    datagen.save_dataset(ds, p)
    raw = p.read_bytes()
    assert raw[:4] == b'MADP'
    assert len(raw) == 4 + 4 + 4 + 8 + 300 * (6 * 4 + 1 + 4 + 1)
    back = datagen.load_dataset(p)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.arity, ds.arity)
    np.testing.assert_array_equal(back.split, ds.split)
    p.write_bytes(b'XXXX' + raw[4:])
    with pytest.raises(ValueError, match='magic'):
        datagen.load_dataset(p)
    p.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        datagen.load_dataset(p)


def test_errors():
    with pytest.raises(ValueError):
        RegressionSpec(dim=0)
    with pytest.raises(ValueError):
        RegressionSpec(steepness=0)
    with pytest.raises(ValueError):
        datagen.gen_regression(Hypergraph(3, ()), RegressionSpec())
