import numpy as np
import pytest

from ghmnet import oracle
from ghmnet.errors import EnumerationLimitError, InvalidNoiseError, InvalidSampleError
from ghmnet.ghm import copy_chain_params, generate_params, sample
from ghmnet.topology import build

from conftest import random_instance


class TestPosteriorLabel:
    def test_uniform_tables(self):
        p = generate_params(build(2, [2, 2]), 3, 3.0, mode="uniform")
        np.testing.assert_allclose(oracle.posterior_label(p, [1, 3, 2, 2]), 1 / 3, atol=1e-15)

    def test_copy_chain(self):
        p = copy_chain_params(build(2, [2, 2]), 2)
        np.testing.assert_allclose(oracle.posterior_label(p, [1, 1, 1, 1]), [1.0, 0.0])

    def test_sums_to_one(self):
        p = random_instance(3)
        x = sample(p, seed=0).x
        assert oracle.posterior_label(p, x).sum() == pytest.approx(1.0, abs=1e-12)

    def test_sibling_swap_invariance(self):
        # all ranks share one table, so swapping sibling subtrees is a symmetry
        t = np.array([[0.7, 0.3], [0.2, 0.8]])
        topo = build(2, [2, 2])
        p = generate_params(topo, 2, 5.0, mode="explicit", tables=[np.stack([t, t])] * 2)
        a = oracle.posterior_label(p, [1, 2, 2, 2])
        b = oracle.posterior_label(p, [2, 2, 1, 2])
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_cap(self):
        p = random_instance(0)
        with pytest.raises(EnumerationLimitError):
            oracle.posterior_label(p, sample(p, seed=0).x, cap=1)

    def test_bad_leaves(self):
        p = generate_params(build(1, [2]), 2, 2.0, mode="uniform")
        with pytest.raises(InvalidSampleError):
            oracle.posterior_label(p, [1, 3])


class TestPosteriorDenoise:
    def test_large_z_pushes_mean_to_top_state(self):
        p = random_instance(5, S=3)
        out = oracle.posterior_denoise(p, np.full(p.topology.d, 60.0))
        np.testing.assert_allclose(out.mean, 3.0, atol=1e-9)

    def test_uniform_two_point_formula(self):
        p = generate_params(build(1, [2]), 2, 2.0, mode="uniform")
        z, s2 = np.array([0.3, 1.9]), 0.8
        # P(x=2 | z) = 1 / (1 + exp(-(z - 1.5) / s2)) for independent uniform leaves
        p2 = 1 / (1 + np.exp(-(z - 1.5) / s2))
        out = oracle.posterior_denoise(p, z, s2)
        np.testing.assert_allclose(out.marginals[:, 1], p2, atol=1e-14)
        np.testing.assert_allclose(out.mean, 1 + p2, atol=1e-14)

    def test_small_noise_recovers_lattice_point(self):
        p = random_instance(6)
        x = sample(p, seed=1).x
        out = oracle.posterior_denoise(p, x.astype(float), 1e-4)
        np.testing.assert_allclose(out.mean, x, atol=1e-9)

    def test_marginals_normalized_and_mean_in_range(self):
        p = random_instance(7)
        out = oracle.posterior_denoise(p, np.random.default_rng(0).normal(2, 2, p.topology.d))
        np.testing.assert_allclose(out.marginals.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((out.mean >= 1) & (out.mean <= p.S))

    def test_rejects_bad_noise(self):
        p = random_instance(0)
        with pytest.raises(InvalidNoiseError):
            oracle.posterior_denoise(p, np.zeros(p.topology.d), 0.0)


class TestLeafMarginal:
    def test_sums_to_one_and_index_layout(self):
        p = random_instance(8, max_leaves=4)
        marg = oracle.leaf_marginal(p)
        assert marg.sum() == pytest.approx(1.0, abs=1e-12)
        x = sample(p, seed=2, size=200_000).x
        freq = np.bincount(oracle.leaf_index(x, p.S), minlength=marg.size) / x.shape[0]
        assert np.abs(freq - marg).max() < 5 * np.sqrt(0.25 / x.shape[0])
