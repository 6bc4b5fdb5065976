import math

import numpy as np
import pytest
from scipy import linalg, special

from madp import dptrain as dt
from madp.datagen import TEST, TRAIN, VALIDATION, RegressionDataset, RegressionSpec, gen_regression
from madp.hypergraph import Hypergraph, Schedule, Selection


def make_dataset(X, y, split=None):
    n = len(y)
    split = np.full(n, TRAIN, dtype=np.uint8) if split is None else split
    return RegressionDataset(np.asarray(X, dtype=np.float32), np.asarray(y, dtype=np.uint8),
                             np.ones(n, dtype=np.int64), split)


def separable(seed, n=200, margin=0.5):
    rng = np.random.default_rng(seed)
    w = np.array([1.0, -1.0]) / math.sqrt(2)
    X = []
    while len(X) < n:
        x = rng.uniform(-3, 3, 2)
        if abs(x @ w) >= margin:
            X.append(x)
    X = np.array(X)
    y = (X @ w > 0).astype(np.uint8)
    return X, y


def ce_loss(theta, x, label):
    z = x @ theta[:-1] + theta[-1]
    return np.logaddexp(0.0, z) - label * z


# -- gradients -----------------------------------------------------------------


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        d = int(rng.integers(1, 8))
        theta = rng.normal(0, 1, d + 1)
        x = rng.normal(0, 1, d)
        label = float(rng.integers(0, 2))
        g = dt.loss_grad(dt.Model.from_theta(theta), x, label)
        fd = np.array([(ce_loss(theta + h * e, x, label) - ce_loss(theta - h * e, x, label)) / (2 * h)
                       for e in np.eye(d + 1)])
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_clipping():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = rng.normal(0, rng.uniform(0.01, 10), 5)
        c = rng.uniform(0.05, 5)
        out = dt.clip(v, c)
        assert np.linalg.norm(out) <= c * (1 + 1e-12)
        if np.linalg.norm(v) <= c:
            assert out is v
        else:
            np.testing.assert_allclose(out / np.linalg.norm(out), v / np.linalg.norm(v), rtol=1e-12)


def test_zero_gradient_when_prediction_equals_label():
    g = dt.clipped_grad(dt.Model.zeros(3), np.zeros(3), 0.5, 1.0)
    assert (g == 0).all()


def test_clipped_sum_matches_per_example():
    rng = np.random.default_rng(2)
    X = rng.normal(0, 2, (30, 4))
    y = rng.integers(0, 2, 30).astype(float)
    theta = rng.normal(0, 1, 5)
    m = dt.Model.from_theta(theta)
    ref = sum(dt.clipped_grad(m, X[i], y[i], 0.7) for i in range(30))
    got, _ = dt._clipped_sum(theta, X, y, 0.7)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-14)


# -- strategies and noise ----------------------------------------------------------


def random_strategy(rng, T, b):
    coefs = np.zeros((T, b))
    coefs[:, 0] = rng.uniform(0.5, 2.0, T)
    coefs[:, 1:] = rng.normal(0, 0.5, (T, b - 1))
    for j in range(T):
        coefs[j, T - j:] = 0.0  # entries below the matrix
    coefs /= np.linalg.norm(coefs, axis=1, keepdims=True)
    return dt.StrategyMatrix(coefs)


def test_noise_stream_matches_dense_inverse():
    rng = np.random.default_rng(3)
    for _ in range(30):
        T = int(rng.integers(1, 65))
        b = int(rng.integers(1, T + 1))
        C = random_strategy(rng, T, b)
        z = rng.normal(0, 1, (T, 3))
        ref = linalg.solve_triangular(C.dense(), z, lower=True)
        got = np.array(list(dt.NoiseStream(C, 3, 0, z=z)))
        assert np.abs(got - ref).max() <= 1e-10


def test_noise_stream_identity_and_determinism():
    C = dt.StrategyMatrix.identity(5)
    a = list(dt.correlated_noise(C, 1.0, 0.25, 4, seed=7))
    s = dt.NoiseStream(C, 4, 7)
    for i, v in enumerate(a):
        np.testing.assert_array_equal(v, 0.25 * s.base(i))
    b = list(dt.correlated_noise(C, 1.0, 0.25, 4, seed=7))
    assert all((x == y).all() for x, y in zip(a, b))


def test_build_strategy():
    assert (dt.build_strategy(10, 1).dense() == np.eye(10)).all()
    assert (dt.build_strategy(10, 4, mode='identity').dense() == np.eye(10)).all()
    for T, b in [(8, 2), (20, 4), (64, 8), (30, 30)]:
        C = dt.build_strategy(T, b)
        assert C.band == b
        np.testing.assert_allclose(C.column_norms(), 1.0, atol=1e-12)
        assert (C.coefs[:, 0] > 0).all()
        # Objective oracle: ||A C^{-1}||_F^2 with A the all-ones lower triangle.
        A = np.tril(np.ones((T, T)))
        obj = np.sum((A @ np.linalg.inv(C.dense())) ** 2)
        assert obj <= np.sum(A ** 2) + 1e-9
        assert dt.factorization_error(C) == pytest.approx(obj, rel=1e-10)


def test_toeplitz_error_matches_dense():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n, b = int(rng.integers(2, 40)), int(rng.integers(1, 6))
        c = np.concatenate([[1.0], rng.normal(0, 0.3, b - 1)])
        C = dt.StrategyMatrix.from_toeplitz(n, c)
        assert dt.toeplitz_error(n, c) == pytest.approx(dt.factorization_error(C), rel=1e-9)


# -- training ------------------------------------------------------------------------


def test_sigma_zero_equals_nonprivate():
    X, y = separable(0, n=60)
    ds = make_dataset(X, y)
    sel = Selection.from_ids(range(60))
    cfg = dt.TrainConfig(steps=25, batch_size=60, clip_norm=math.inf, learning_rate=0.3, optimizer='sgd')
    res = dt.dpsgd_train(ds, sel, cfg)
    ref = dt.train_nonprivate(X.astype(np.float32), y, 25, 0.3)
    np.testing.assert_array_equal(res.model.theta, ref.theta)


def test_dpmf_identity_equals_dpsgd_fixed_batches():
    X, y = separable(1, n=80)
    ds = make_dataset(X, y, split=np.where(np.arange(80) < 60, TRAIN, TEST).astype(np.uint8))
    rng = np.random.default_rng(5)
    batches = [sorted(rng.choice(60, 10, replace=False).tolist()) for _ in range(12)]
    cfg = dt.TrainConfig(steps=12, batch_size=10, clip_norm=0.5, noise_multiplier=2.0,
                         learning_rate=0.05, seed=9, log_every=1)
    a = dt.dpsgd_train(ds, Selection.from_ids(range(60)), cfg, eval_split=TEST, batches=batches)
    b = dt.dpmf_train(ds, Schedule(batches, 10), cfg, dt.StrategyMatrix.identity(12), eval_split=TEST)
    np.testing.assert_array_equal(a.model.theta, b.model.theta)
    assert a.trajectory == b.trajectory


def test_noise_std_monte_carlo():
    C = dt.StrategyMatrix.identity(10_000)
    cfg = dt.TrainConfig(steps=10_000, batch_size=50, clip_norm=2.0, noise_multiplier=3.0)
    noise = np.array(list(dt.correlated_noise(C, 3.0, cfg.noise_scale, 8, seed=1)))
    assert noise.std() == pytest.approx(2.0 * 3.0 / 50, rel=0.05)
    # Through the trainer: empty batches and SGD with lr=1 leave -sum(noise).
    ds = make_dataset(np.zeros((1, 3)), np.zeros(1))
    finals = []
    for seed in range(400):
        cfg = dt.TrainConfig(steps=25, batch_size=50, clip_norm=2.0, noise_multiplier=3.0,
                             learning_rate=1.0, optimizer='sgd', seed=seed)
        r = dt.dpsgd_train(ds, Selection.from_ids([0]), cfg, batches=[[]] * 25)
        finals.append(r.model.theta)
    assert np.std(finals) / math.sqrt(25) == pytest.approx(2.0 * 3.0 / 50, rel=0.05)


def test_separable_toy_reaches_high_accuracy():
    X, y = separable(2, n=250)
    split = np.full(250, TRAIN, dtype=np.uint8)
    split[200:] = TEST
    ds = make_dataset(X, y, split)
    cfg = dt.TrainConfig(steps=500, batch_size=50, clip_norm=1.0, learning_rate=0.05, seed=1)
    res = dt.dpsgd_train(ds, Selection.from_ids(range(200)), cfg)
    _, acc = dt.evaluate(res.model, ds, TEST)
    ref = dt.train_nonprivate(X[:200], y[:200], 500, 0.5)
    ref_acc = np.mean((ref.logits(X[200:]) >= 0) == (y[200:] == 1))
    assert ref_acc >= 0.95
    assert acc >= 0.95


def test_larger_sigma_does_not_lower_loss():
    X, y = separable(3, n=300, margin=0.2)
    split = np.full(300, TRAIN, dtype=np.uint8)
    split[240:] = TEST
    ds = make_dataset(X, y, split)
    rng = np.random.default_rng(0)
    sch = Schedule([sorted(rng.choice(240, 20, replace=False).tolist()) for _ in range(40)], 20)
    C = dt.build_strategy(40, 4)
    means = []
    for sigma in (0.0, 2.0, 8.0):
        losses = []
        for seed in range(12):
            cfg = dt.TrainConfig(steps=40, batch_size=20, noise_multiplier=sigma, learning_rate=0.05, seed=seed)
            losses.append(dt.evaluate(dt.dpmf_train(ds, sch, cfg, C, min_sep=4).model, ds, TEST)[0])
        means.append(np.mean(losses))
    assert means[0] <= means[1] <= means[2]


def test_empty_batch_is_pure_noise():
    ds = make_dataset(np.ones((2, 2)), np.array([1, 0]))
    cfg = dt.TrainConfig(steps=1, batch_size=4, clip_norm=1.0, noise_multiplier=1.0,
                         learning_rate=1.0, optimizer='sgd', seed=3)
    C = dt.StrategyMatrix.identity(1)
    res = dt.dpmf_train(ds, Schedule([[]], 4), cfg, C)
    np.testing.assert_array_equal(res.model.theta, -cfg.noise_scale * dt.NoiseStream(C, 3, 3).base(0))


def test_dpmf_errors():
    ds = make_dataset(np.ones((4, 2)), np.array([1, 0, 1, 0]))
    cfg = dt.TrainConfig(steps=2, batch_size=1)
    with pytest.raises(ValueError, match='covers'):
        dt.dpmf_train(ds, Schedule([[0], [1], [2]], 1), cfg, dt.StrategyMatrix.identity(2))
    with pytest.raises(ValueError, match='min-sep'):
        dt.dpmf_train(ds, Schedule([[0], [1]], 1), cfg, dt.build_strategy(2, 2), min_sep=1)
    with pytest.raises(ValueError, match='empty'):
        dt.dpsgd_train(ds, Selection.from_ids([]), cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        dt.TrainConfig(steps=1, batch_size=0)
    with pytest.raises(ValueError):
        dt.TrainConfig(steps=1, batch_size=1, optimizer='rmsprop')
    assert dt.TrainConfig(steps=1, batch_size=4, noise_multiplier=0).noise_scale == 0.0


def test_poisson_batches():
    sizes = [len(b) for b in dt.poisson_batches(1000, 0.1, 400, seed=0)]
    assert np.mean(sizes) == pytest.approx(100, rel=0.03)
    first = list(dt.poisson_batches(50, 0.3, 5, seed=4))
    again = list(dt.poisson_batches(50, 0.3, 5, seed=4))
    assert all((a == b).all() and (np.diff(a) > 0).all() for a, b in zip(first, again))
    assert all(len(b) == 7 for b in dt.poisson_batches(7, 1.0, 3, seed=0))


# -- evaluation and I/O ---------------------------------------------------------


def test_evaluate_examples():
    ds = make_dataset(np.ones((4, 2)), np.array([1, 1, 1, 0]))
    loss, acc = dt.evaluate(dt.Model.zeros(2), ds, TRAIN)
    assert acc == 0.75 and loss == pytest.approx(math.log(2))
    X, y = separable(4, n=50)
    ds = make_dataset(X, y)
    w = np.array([1.0, -1.0]) * 100
    assert dt.evaluate(dt.Model(w, 0.0), ds, TRAIN)[1] == 1.0
    with pytest.raises(ValueError):
        dt.evaluate(dt.Model.zeros(2), ds, VALIDATION)


def test_ground_truth_accuracy_well_separated():
    rng = np.random.default_rng(0)
    edges = [tuple(rng.choice(4000, 2, replace=False)) for _ in range(20_000)]
    h = Hypergraph.from_edges(4000, edges)
    ds = gen_regression(h, RegressionSpec(dim=100, seed=3))
    w = ds.spec.steepness * ds.effective_weights(2)[0]
    _, acc = dt.evaluate(dt.Model(w, 0.0), ds, TEST)
    assert 0.6 <= acc <= 0.98
    # Consistent with the generator's own label probabilities.
    p = ds.label_probability(ds.indices(TEST))
    assert acc == pytest.approx(np.mean(np.maximum(p, 1 - p)), abs=0.02)


def test_model_checkpoint_round_trip(tmp_path):
    m = dt.Model(np.array([1.5, -2.0, 3.25]), 0.125)
    p = tmp_path / 'm.bin'
    dt.save_model(m, p)
    raw = p.read_bytes()
    assert raw[:4] == b'MADM' and len(raw) == 8 + 8 * 4
    m2 = dt.load_model(p)
    np.testing.assert_array_equal(m2.weights, m.weights)
    assert m2.intercept == m.intercept
    p.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        dt.load_model(p)
    p.write_bytes(b'XXXX' + raw[4:])
    with pytest.raises(ValueError):
        dt.load_model(p)


def test_trajectory_csv(tmp_path):
    X, y = separable(5, n=40)
    ds = make_dataset(X, y, split=np.where(np.arange(40) < 30, TRAIN, TEST).astype(np.uint8))
    cfg = dt.TrainConfig(steps=10, batch_size=10, log_every=5)
    res = dt.dpsgd_train(ds, Selection.from_ids(range(30)), cfg, eval_split=TEST)
    assert [r['step'] for r in res.trajectory] == [5, 10]
    p = tmp_path / 't.csv'
    dt.save_trajectory(res.trajectory, p)
    lines = p.read_text().splitlines()
    assert lines[0] == 'step,loss,accuracy,sigma,grad_norm_mean' and len(lines) == 3
