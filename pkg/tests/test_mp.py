import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax

from ghmnet import bp, mp
from ghmnet.errors import ConfigurationError, InvalidNoiseError, NumericError
from ghmnet.ghm import corrupt, generate_params, sample
from ghmnet.topology import build

from conftest import random_instance
from perturb import classify_root_deviation, denoise_leaf_deviation

vectors = arrays(np.float64, 4, elements=st.floats(-50, 50))


class TestNormalize:
    def test_examples(self):
        np.testing.assert_array_equal(mp.normalize([1.0, 3.0]), [-2.0, 0.0])
        np.testing.assert_array_equal(mp.normalize([0.0, 0.0]), [0.0, 0.0])

    def test_nan(self):
        with pytest.raises(NumericError):
            mp.normalize([np.nan, 1.0])

    def test_all_minus_inf(self):
        with pytest.raises(NumericError):
            mp.normalize([-np.inf, -np.inf])

    @given(vectors)
    def test_max_is_zero(self, h):
        assert mp.normalize(h).max() == 0.0

    @given(vectors, vectors)
    def test_two_lipschitz(self, a, b):
        lhs = np.abs(mp.normalize(a) - mp.normalize(b)).max()
        assert lhs <= 2 * np.abs(a - b).max() + 1e-9


class TestExactMaps:
    @settings(max_examples=50)
    @given(vectors, vectors, st.integers(0, 1000))
    def test_lse_non_expansive(self, a, b, seed):
        t = np.random.default_rng(seed).dirichlet(np.ones(4), size=4)
        f = mp.LseFn(t)
        lhs = np.abs(f(a[None]) - f(b[None])).max()
        assert lhs <= np.abs(a - b).max() + 1e-9

    def test_leaf_map(self):
        t = np.array([[0.6, 0.4], [0.1, 0.9]])
        np.testing.assert_allclose(mp.LogColumnFn(t)(np.array([2.0])), np.log([[0.4, 0.9]]))


class TestClassify:
    def test_matches_bp_at_every_node(self, small_instances):
        worst = 0.0
        for i, p in enumerate(small_instances):
            x = sample(p, seed=i, size=6).x
            post, state = mp.mp_classify(p, x, return_state=True)
            ref, bstate = bp.bp_classify(p, x, return_state=True)
            worst = max(worst, np.abs(post - ref).max())
            for l in range(p.topology.L):
                worst = max(worst, np.abs(softmax(state.h_down[l], axis=-1) - bstate.down[l]).max())
        assert worst < 1e-10

    def test_uniform(self):
        p = generate_params(build(2, [2, 2]), 2, 2.0, mode="uniform")
        np.testing.assert_allclose(mp.mp_classify(p, [2, 1, 1, 2]), 0.5, atol=1e-15)

    def test_normalization_is_inessential(self, small_instances):
        for i, p in enumerate(small_instances[:20]):
            x = sample(p, seed=i, size=4).x
            np.testing.assert_allclose(
                mp.mp_classify(p, x, normalize_messages=False), mp.mp_classify(p, x), atol=1e-10, rtol=0
            )


class TestDenoise:
    def test_node_identities(self, small_instances):
        worst = 0.0
        for i, p in enumerate(small_instances):
            rng = np.random.default_rng(i)
            z = corrupt(sample(p, rng, size=4).x, 1.0, rng)
            post, mean, st_ = mp.mp_denoise(p, z, return_state=True)
            bpost, bmean, bst = bp.bp_denoise(p, z, return_state=True)
            worst = max(worst, np.abs(post - bpost).max(), np.abs(mean - bmean).max())
            L = p.topology.L
            for l in range(L + 1):
                worst = max(worst, np.abs(softmax(st_.h_down[l], axis=-1) - bst.down[l]).max())
                worst = max(worst, np.abs(softmax(st_.b_up[l] - st_.h_down[l], axis=-1) - bst.up[l]).max())
            worst = max(worst, np.abs(softmax(st_.b_up[L], axis=-1) - bst.marginal(L)).max())
        assert worst < 1e-10

    def test_symmetric_midpoint(self):
        p = generate_params(build(1, [1]), 2, 2.0, mode="uniform")
        assert mp.mp_denoise(p, [1.5])[1][0] == pytest.approx(1.5, abs=1e-15)

    def test_normalization_is_inessential(self, small_instances):
        for i, p in enumerate(small_instances[:20]):
            z = corrupt(sample(p, seed=i, size=4).x, 1.0, i)
            a = mp.mp_denoise(p, z, normalize_messages=False)
            b = mp.mp_denoise(p, z)
            np.testing.assert_allclose(a[0], b[0], atol=1e-10, rtol=0)

    def test_bad_noise(self):
        p = random_instance(0)
        with pytest.raises(InvalidNoiseError):
            mp.mp_denoise(p, np.zeros(p.topology.d), 0.0)


class TestAmpRun:
    def test_exact_fns_reproduce_mp_bitwise(self):
        p = random_instance(21)
        x = sample(p, seed=0, size=5).x
        z = corrupt(x, 1.0, 1)
        prior = np.log(p.root_marginal)
        a = mp.amp_run(p.topology, p.S, mp.exact_fns(p, mp.CLASSIFY), x, mp.CLASSIFY, root_log_prior=prior)
        np.testing.assert_array_equal(a.output, mp.mp_classify(p, x))
        b = mp.amp_run(p.topology, p.S, mp.exact_fns(p, mp.DENOISE), z, mp.DENOISE, root_log_prior=prior)
        np.testing.assert_array_equal(b.mean, mp.mp_denoise(p, z)[1])

    def test_missing_fn(self):
        p = random_instance(21)
        fns = mp.exact_fns(p, mp.DENOISE)
        fns.pop((mp.UP, 1, 0))
        with pytest.raises(ConfigurationError):
            mp.amp_run(p.topology, p.S, fns, np.zeros((1, p.topology.d)), mp.DENOISE)

    @pytest.mark.parametrize("seed", range(6))
    def test_classification_error_propagation(self, seed):
        p = random_instance(seed, shapes=[(1, [3]), (2, [2, 2]), (3, [2, 1, 2]), (3, [2, 2, 2])])
        delta = 1e-3
        x = sample(p, seed=seed, size=50).x
        bound = delta * np.prod([2 * m + 1 for m in p.topology.branching])
        assert classify_root_deviation(p, delta, x) <= bound

    @pytest.mark.parametrize("seed", range(6))
    def test_denoising_error_propagation(self, seed):
        p = random_instance(seed, shapes=[(1, [3]), (2, [2, 2]), (3, [2, 1, 2]), (3, [2, 2, 2])])
        delta = 1e-3
        z = corrupt(sample(p, seed=seed, size=50).x, 1.0, seed)
        L, d = p.topology.L, p.topology.d
        assert denoise_leaf_deviation(p, delta, z) <= delta * 18**L * d


def test_log_evidence_matches_enumeration():
    from ghmnet.oracle import leaf_marginal
    import itertools

    p = random_instance(30, max_leaves=4)
    X = np.array(list(itertools.product(range(1, p.S + 1), repeat=p.topology.d)))
    np.testing.assert_allclose(np.exp(mp.log_evidence(p, X)), leaf_marginal(p), atol=1e-14)
