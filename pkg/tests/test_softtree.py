import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from mixbart.randkit import RngStream
from mixbart.softtree import (
    LeafPrior,
    SoftTree,
    SplitProbabilities,
    TreePrior,
    draw_leaves,
    integrated_log_likelihood,
    leaf_weights,
    log_tree_prior,
    predict,
    predict_ensemble,
    propose_structure,
    sample_tree_from_prior,
    split_probability,
    update_bandwidth,
    update_split_probabilities,
)


def two_split_tree(bandwidth=0.1):
    # root splits z0 at 0.5; its left child splits z1 at 0.3
    return SoftTree([0, 1, -1, -1, -1], [0.5, 0.3, 0, 0, 0], [0, 0, 1.0, 2.0, 3.0], bandwidth)


@st.composite
def random_trees(draw):
    seed = draw(st.integers(0, 10_000))
    bw = draw(st.floats(1e-4, 2.0))
    tree = sample_tree_from_prior(TreePrior(), SplitProbabilities.uniform(3), RngStream(seed),
                                  LeafPrior(1.0), bandwidth=bw)
    return tree


def test_gate_at_three_bandwidths():
    tree = SoftTree([0, -1, -1], [0.0, 0, 0], [0, 0, 1.0], bandwidth=1.0)
    assert predict(tree, [[3.0]])[0] == pytest.approx(0.952574, abs=1e-6)


@given(random_trees(), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_leaf_weights_on_simplex(tree, seed):
    Z = np.random.default_rng(seed).random((30, 3))
    phi = leaf_weights(tree, Z)
    assert phi.shape == (30, tree.n_leaves)
    assert np.all(phi >= 0)
    np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(predict(tree, Z), phi @ tree.leaf_values, atol=1e-12)


def test_hard_limit_matches_indicator_tree():
    tree = two_split_tree(bandwidth=1e-6)
    Z = np.random.default_rng(0).random((500, 2))
    Z = Z[(np.abs(Z[:, 0] - 0.5) > 1e-3) & (np.abs(Z[:, 1] - 0.3) > 1e-3)]
    hard = np.where(Z[:, 0] > 0.5, 3.0, np.where(Z[:, 1] > 0.3, 2.0, 1.0))
    np.testing.assert_allclose(predict(tree, Z), hard, atol=1e-12)


def test_predict_ensemble_sums_trees():
    trees = [two_split_tree(), SoftTree.stump(0.7)]
    Z = np.random.default_rng(1).random((20, 2))
    np.testing.assert_allclose(predict_ensemble(trees, Z), predict(trees[0], Z) + 0.7)


@pytest.mark.parametrize("y", [(1.0, 1.0), (1.0, 0.0)])
def test_integrated_likelihood_hand_value(y):
    # one leaf shared by two rows: y* ~ N(0, I + J), and y'(I + J)^-1 y = 2/3 for both inputs
    ll = integrated_log_likelihood([[1.0], [1.0]], list(y), [1.0, 1.0], LeafPrior(1.0))
    assert ll == pytest.approx(-0.5 * (2 * math.log(2 * math.pi) + math.log(3) + 2 / 3), abs=1e-12)


def test_integrated_likelihood_quadrature_oracle():
    phi = np.array([[0.2], [0.7], [1.0]])
    y = np.array([0.3, -1.2, 0.8])
    omega = np.array([0.5, 2.0, 1.3])
    s = 0.6

    def integrand(mu):
        return np.exp(stats.norm.logpdf(y, phi[:, 0] * mu, 1 / np.sqrt(omega)).sum() + stats.norm.logpdf(mu, 0, s))

    val, _ = integrate.quad(integrand, -10, 10)
    assert integrated_log_likelihood(phi, y, omega, LeafPrior(s)) == pytest.approx(math.log(val), abs=1e-4)


def test_integrated_likelihood_three_leaf_quadrature():
    # soft three-leaf tree, five rows; integrate over the leaves on a Gauss-Hermite product grid
    tree = SoftTree([0, 1, -1, -1, -1], [0.5, 0.3, 0, 0, 0], [0, 0, 0, 0, 0], 0.2)
    Z = np.random.default_rng(6).random((5, 2))
    phi = leaf_weights(tree, Z)
    y = np.array([0.4, -0.9, 1.1, 0.2, -0.3])
    omega = np.array([1.5, 0.7, 2.2, 1.0, 0.4])
    s = 0.8
    x, w = np.polynomial.hermite_e.hermegauss(40)
    mu = np.stack(np.meshgrid(x, x, x, indexing="ij"), -1).reshape(-1, 3) * s
    weight = np.einsum("i,j,k->ijk", w, w, w).reshape(-1) / (2 * math.pi) ** 1.5
    loglik = stats.norm.logpdf(y[None, :], mu @ phi.T, 1 / np.sqrt(omega)).sum(axis=1)
    oracle = math.log(np.sum(weight * np.exp(loglik)))
    assert integrated_log_likelihood(phi, y, omega, LeafPrior(s)) == pytest.approx(oracle, abs=1e-4)


def test_draw_leaves_flat_prior_limit():
    y = np.array([0.5, 1.5, -0.2, 0.9])
    rng = RngStream(7)
    draws = np.array([draw_leaves(np.ones((4, 1)), y, np.ones(4), LeafPrior(1e6), rng)[0] for _ in range(40_000)])
    assert abs(draws.mean() - y.mean()) < 0.01
    assert abs(draws.var() - 0.25) < 0.01


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_integrated_likelihood_gaussian_identity(seed):
    rng = np.random.default_rng(seed)
    n, L = 8, 3
    phi = rng.dirichlet(np.ones(L), n)
    omega = rng.gamma(2.0, 0.5, n)
    y = rng.normal(size=n)
    s = 0.4
    cov = np.diag(1 / omega) + s ** 2 * phi @ phi.T
    expected = stats.multivariate_normal(np.zeros(n), cov).logpdf(y)
    assert integrated_log_likelihood(phi, y, omega, LeafPrior(s)) == pytest.approx(expected, abs=1e-8)


def test_integrated_likelihood_structure_only_difference():
    # dropping constants shifts every structure by the same amount
    rng = np.random.default_rng(3)
    y, omega = rng.normal(size=6), rng.gamma(2.0, 1.0, 6)
    a, b = rng.dirichlet(np.ones(2), 6), rng.dirichlet(np.ones(3), 6)
    full = [integrated_log_likelihood(p, y, omega, LeafPrior(0.5)) for p in (a, b)]
    bare = [integrated_log_likelihood(p, y, omega, LeafPrior(0.5), include_constants=False) for p in (a, b)]
    assert full[0] - full[1] == pytest.approx(bare[0] - bare[1], abs=1e-12)


def test_draw_leaves_conditional_moments():
    phi = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    y, omega, s = np.array([1.0, 0.0, -1.0]), np.array([2.0, 1.0, 3.0]), 0.8
    A = phi.T @ (omega[:, None] * phi) + np.eye(2) / s ** 2
    mean = np.linalg.solve(A, phi.T @ (omega * y))
    rng = RngStream(4)
    draws = np.array([draw_leaves(phi, y, omega, LeafPrior(s), rng) for _ in range(50_000)])
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.01)
    np.testing.assert_allclose(np.cov(draws.T), np.linalg.inv(A), atol=0.01)


def test_grow_prune_are_inverse():
    tree = two_split_tree()
    for leaf in tree.leaves:
        grown = tree.grow(int(leaf), 1, 0.25)
        assert grown.n_leaves == tree.n_leaves + 1
        back = grown.prune(int(leaf))
        np.testing.assert_array_equal(back.var, tree.var)
        np.testing.assert_array_equal(back.cut, tree.cut)
        np.testing.assert_allclose(back.leaf_values, tree.leaf_values)


def test_nog_nodes_and_errors():
    tree = two_split_tree()
    np.testing.assert_array_equal(tree.nog_nodes(), [1])
    with pytest.raises(ValueError):
        tree.prune(0)
    with pytest.raises(ValueError):
        tree.grow(0, 0, 0.5)
    with pytest.raises(ValueError):
        tree.change(2, 0, 0.5)


def test_records_round_trip():
    tree = two_split_tree(0.37)
    back = SoftTree.from_records(tree.to_records(), tree.bandwidth)
    Z = np.random.default_rng(5).random((10, 2))
    np.testing.assert_array_equal(predict(back, Z), predict(tree, Z))


def _shapes(depth, max_depth):
    """All pre-order split/leaf patterns rooted at ``depth`` with no split below ``max_depth``."""
    yield (depth,), ()
    if depth < max_depth:
        for (ld, lsplit), (rd, rsplit) in itertools.product(list(_shapes(depth + 1, max_depth)), repeat=2):
            yield (-1,) + ld + rd, (depth,) + lsplit + rsplit


def _tree_from_pattern(pattern):
    var = [0 if d < 0 else -1 for d in pattern]
    return SoftTree(var, [0.5] * len(var), [0.0] * len(var))


def test_shape_prior_normalizes():
    prior = TreePrior()
    totals = [sum(math.exp(log_tree_prior(_tree_from_pattern(p), prior)) for p, _ in _shapes(0, d))
              for d in (3, 4)]
    # mass missing from an enumeration is the chance that some deepest node splits
    assert totals[0] < totals[1] <= 1.0 + 1e-12
    assert totals[1] > 0.999
    assert split_probability(0, prior) == pytest.approx(0.95)


def test_prior_sampler_matches_shape_prior():
    prior = TreePrior()
    sp = SplitProbabilities.uniform(2)
    rng = RngStream(6)
    n = 40_000
    counts = {}
    for _ in range(n):
        key = sample_tree_from_prior(prior, sp, rng).shape_key()
        counts[key] = counts.get(key, 0) + 1
    for key in [(0,), (1, 0, 0), (1, 1, 0, 0, 0), (1, 0, 1, 0, 0)]:
        tree = _tree_from_pattern([-1 if k else 1 for k in key])
        p = math.exp(log_tree_prior(tree, prior))
        assert abs(counts.get(key, 0) / n - p) < 5 * math.sqrt(p * (1 - p) / n) + 1e-3


def test_structure_moves_leave_prior_invariant():
    # flat likelihood: the MH chain on structures must sample the tree prior
    prior = TreePrior()
    sp = SplitProbabilities.uniform(2)
    rng = RngStream(7)
    gen = rng.generator
    tree = SoftTree.stump()
    leaves = []
    for it in range(60_000):
        cand, log_prop, log_prior, _ = propose_structure(tree, sp, prior, gen)
        if math.isfinite(log_prior) and math.log(gen.random()) < log_prior + log_prop:
            tree = cand
        if it >= 5000:
            leaves.append(tree.n_leaves)
    leaves = np.array(leaves)
    ref = np.array([sample_tree_from_prior(prior, sp, rng).n_leaves for _ in range(40_000)])
    for k in (1, 2, 3):
        assert abs(np.mean(leaves == k) - np.mean(ref == k)) < 0.02


def test_dirichlet_update_mean():
    trees = [SoftTree([0, -1, -1], [0.5, 0, 0], [0, 0, 0])] * 10
    sp = SplitProbabilities.uniform(10, concentration=1.0, sparse=True)
    rng = RngStream(8)
    draws = np.array([update_split_probabilities(trees, sp, rng).weights for _ in range(20_000)])
    assert abs(draws[:, 0].mean() - 10.1 / 11) < 0.005
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)


def test_dense_split_probabilities_unchanged():
    sp = SplitProbabilities.uniform(4, sparse=False)
    assert update_split_probabilities([two_split_tree()], sp, RngStream(0)) is sp


def test_bandwidth_update_samples_prior_under_flat_likelihood():
    prior = TreePrior(bandwidth_rate=10.0, bandwidth_step=0.8)
    tree = two_split_tree(0.1)
    Z = np.random.default_rng(9).random((5, 2))
    omega = np.full(5, 1e-12)
    wr = np.zeros(5)
    rng = RngStream(10)
    bws = []
    for it in range(60_000):
        tree, _, _, _ = update_bandwidth(tree, Z, omega, wr, LeafPrior(0.5), prior, rng)
        if it >= 2000:
            bws.append(tree.bandwidth)
    assert abs(np.mean(bws) - 0.1) < 0.006


def test_change_move_keeps_shape():
    rng = RngStream(11)
    tree = two_split_tree()
    prior = TreePrior(p_grow=0.0, p_prune=0.0, p_change=1.0)
    cand, log_prop, log_prior, move = propose_structure(tree, SplitProbabilities.uniform(2), prior, rng)
    assert move == "change" and cand.shape_key() == tree.shape_key()
    assert log_prop == pytest.approx(-log_prior)
