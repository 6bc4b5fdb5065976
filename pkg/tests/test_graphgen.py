import math

import numpy as np
import pytest
from scipy import stats

from madp import graphgen
from madp.graphgen import GraphGenSpec
from madp.hypergraph import Hypergraph, format_hypergraph


def test_user_count():
    assert GraphGenSpec(125_000, 2, 2).num_users == 125_000
    assert GraphGenSpec(1000, 2, 8).num_users == 250


def test_zero_edges_is_an_error():
    with pytest.raises(ValueError):
        graphgen.gen_regular(GraphGenSpec(0))
    with pytest.raises(ValueError):
        graphgen.gen_skewed(GraphGenSpec(0))


def test_truncated_rate_matches_truncated_mean():
    # Oracle: mean of the zero-truncated Poisson pmf, summed directly.
    for mean in (1.2, 2.0, 3.5, 8.0):
        lam = graphgen.truncated_poisson_rate(mean)
        n = np.arange(1, 200)
        pmf = stats.poisson.pmf(n, lam)
        assert abs((n * pmf).sum() / pmf.sum() - mean) < 1e-9
    assert graphgen.truncated_poisson_rate(1.0) == 0.0
    with pytest.raises(ValueError):
        graphgen.truncated_poisson_rate(0.5)


def test_regular_small_mean_arity():
    h = graphgen.gen_regular(GraphGenSpec(1000, seed=7))
    assert 1.8 <= h.arity.mean() <= 2.2


def test_regular_mean_arity_three_standard_errors():
    h = graphgen.gen_regular(GraphGenSpec(100_000, seed=3))
    a = h.arity
    se = a.std(ddof=1) / math.sqrt(len(a))
    assert abs(a.mean() - 2.0) <= 3 * se


def test_resample_policy_inflates_mean():
    lam = 2.0
    expected = lam / -math.expm1(-lam)
    h = graphgen.gen_regular(GraphGenSpec(50_000, seed=4, zero_policy='resample'))
    se = h.arity.std(ddof=1) / math.sqrt(h.num_edges)
    assert abs(h.arity.mean() - expected) <= 4 * se


def test_edges_valid_and_deterministic():
    for model in ('regular', 'skewed'):
        spec = GraphGenSpec(5000, 2.5, 3, seed=9)
        h1, h2 = graphgen.generate(spec, model), graphgen.generate(spec, model)
        assert format_hypergraph(h1) == format_hypergraph(h2)
        assert all(len(e) >= 1 and len(set(e)) == len(e) for e in h1.edges)
        other = graphgen.generate(GraphGenSpec(5000, 2.5, 3, seed=10), model)
        assert other != h1


def test_regular_blocks_independent_of_length():
    a = graphgen.gen_regular(GraphGenSpec(5000, 2, 2, seed=1))
    b = graphgen.gen_regular(GraphGenSpec(9000, 2, 2, seed=1))
    # Same user count is needed for the same draws: both have m = |E|.
    assert a.num_users != b.num_users
    c = graphgen.gen_regular(GraphGenSpec(10_000, 2, 4, seed=1))
    d = graphgen.gen_regular(GraphGenSpec(8_192, 2, 2 * 8_192 / 5_000, seed=1))
    assert c.num_users == d.num_users == 5000
    assert c.edges[:8192] == d.edges


def test_skewed_first_edge_inclusion_law():
    # With all degrees zero every user joins independently with p = rate / m;
    # the arity of a non-empty edge is a zero-truncated Binomial(m, p).
    m, mean = 10, 2.0
    lam = graphgen.truncated_poisson_rate(mean)
    p = lam / m
    oracle = m * p / (1 - (1 - p) ** m)
    ar = np.array([graphgen.gen_skewed(GraphGenSpec(1, mean, mean / m, seed=s)).arity[0]
                   for s in range(3000)])
    se = ar.std(ddof=1) / math.sqrt(len(ar))
    assert abs(ar.mean() - oracle) <= 3.5 * se


def test_skewed_single_edge_and_single_user():
    h = graphgen.gen_skewed(GraphGenSpec(1, seed=2))
    assert h.num_edges == 1 and h.degree_index.max() <= 1
    # One user: its inclusion probability is capped at 1.
    h = graphgen.gen_skewed(GraphGenSpec(20, 1.5, 30, seed=0))
    assert h.num_users == 1 and all(e == (0,) for e in h.edges)


def test_skewed_alpha_zero_matches_regular_statistics():
    n = 20_000
    sk = graphgen.gen_skewed(GraphGenSpec(n, skew_alpha=0.0, seed=5))
    rg = graphgen.gen_regular(GraphGenSpec(n, seed=5))
    for h in (sk, rg):
        se = h.arity.std(ddof=1) / math.sqrt(n)
        assert abs(h.arity.mean() - 2.0) <= 3.5 * se
    # Degrees are approximately Poisson(2) in both models.
    assert abs(sk.degree_index.var() - rg.degree_index.var()) < 0.15
    assert sk.degree_index.max() < 20


def test_skewed_is_heavy_tailed():
    sk = graphgen.gen_skewed(GraphGenSpec(20_000, seed=1))
    rg = graphgen.gen_regular(GraphGenSpec(20_000, seed=1))
    assert sk.degree_index.max() > 5 * rg.degree_index.max()
    assert (sk.degree_index == 0).sum() > (rg.degree_index == 0).sum()


def test_degree_histogram(toy):
    assert graphgen.degree_histogram(toy) == {2: 2, 3: 1, 4: 1}
    assert graphgen.degree_histogram(Hypergraph(0, ())) == {}
    h = graphgen.gen_regular(GraphGenSpec(100_000, seed=8))
    hist = graphgen.degree_histogram(h)
    assert sum(hist.values()) == h.num_users
    # Poisson(2) has tied modes at 1 and 2.
    assert max(hist, key=hist.get) in (1, 2)


def test_spec_validation():
    with pytest.raises(ValueError):
        GraphGenSpec(10, skew_alpha=-1)
    with pytest.raises(ValueError):
        GraphGenSpec(10, expected_arity=0)
    with pytest.raises(ValueError):
        GraphGenSpec(10, zero_policy='drop')
    with pytest.raises(ValueError):
        graphgen.generate(GraphGenSpec(10), 'star')
