import numpy as np
import pytest

from ghmnet import bp, oracle
from ghmnet.errors import InvalidNoiseError, InvalidSampleError
from ghmnet.ghm import copy_chain_params, corrupt, generate_params, sample
from ghmnet.topology import build

from conftest import random_instance


class TestClassify:
    def test_uniform(self):
        p = generate_params(build(2, [2, 2]), 2, 2.0, mode="uniform")
        np.testing.assert_allclose(bp.bp_classify(p, [1, 2, 2, 1]), 0.5)

    def test_copy_chain(self):
        p = copy_chain_params(build(2, [3, 1]), 3)
        np.testing.assert_allclose(bp.bp_classify(p, [2, 2, 2]), [0, 1, 0])

    def test_matches_oracle(self, small_instances):
        worst = 0.0
        for i, p in enumerate(small_instances):
            for x in sample(p, seed=i, size=5).x:
                worst = max(worst, np.abs(bp.bp_classify(p, x) - oracle.posterior_label(p, x)).max())
        assert worst < 1e-10

    def test_batched_equals_single(self):
        p = random_instance(2)
        x = sample(p, seed=0, size=7).x
        batch = bp.bp_classify(p, x)
        for row, xi in zip(batch, x):
            np.testing.assert_array_equal(row, bp.bp_classify(p, xi))

    def test_shape_error(self):
        p = random_instance(2)
        with pytest.raises(InvalidSampleError):
            bp.bp_classify(p, np.ones(p.topology.d + 1))


class TestDenoise:
    def test_matches_oracle(self, small_instances):
        worst = 0.0
        for i, p in enumerate(small_instances):
            rng = np.random.default_rng(i)
            z = corrupt(sample(p, rng, size=3).x, 1.0, rng)
            s2 = float(rng.uniform(0.3, 2.0))
            for zi in z:
                post, mean = bp.bp_denoise(p, zi, s2)
                ref = oracle.posterior_denoise(p, zi, s2)
                worst = max(worst, np.abs(post - ref.marginals).max(), np.abs(mean - ref.mean).max())
        assert worst < 1e-10

    def test_symmetric_midpoint(self):
        p = generate_params(build(1, [1]), 2, 2.0, mode="uniform")
        _, mean = bp.bp_denoise(p, [1.5])
        assert mean[0] == pytest.approx(1.5, abs=1e-15)

    def test_vanishing_noise(self):
        p = random_instance(3)
        x = sample(p, seed=4).x
        _, mean = bp.bp_denoise(p, x.astype(float), 1e-8)
        np.testing.assert_array_equal(np.round(mean), x)

    def test_rejects_bad_noise(self):
        p = random_instance(3)
        with pytest.raises(InvalidNoiseError):
            bp.bp_denoise(p, np.zeros(p.topology.d), -1.0)


class TestInvariants:
    @pytest.mark.parametrize("seed", range(10))
    def test_sibling_order(self, seed):
        p = random_instance(seed)
        rng = np.random.default_rng(seed)
        x = sample(p, rng, size=4).x
        z = corrupt(x, 1.0, rng)
        rev = lambda m: range(m - 1, -1, -1)
        np.testing.assert_allclose(bp.bp_classify(p, x, order=rev), bp.bp_classify(p, x), atol=1e-13, rtol=0)
        a = bp.bp_denoise(p, z, order=rev)
        b = bp.bp_denoise(p, z)
        np.testing.assert_allclose(a[0], b[0], atol=1e-13, rtol=0)

    def test_classify_equals_root_belief_with_clamped_leaves(self):
        # a tiny noise variance clamps the leaves at z = x
        p = random_instance(11)
        x = sample(p, seed=0, size=5).x
        _, _, state = bp.bp_denoise(p, x.astype(float), 1e-6, return_state=True)
        np.testing.assert_allclose(state.marginal(0)[:, 0], bp.bp_classify(p, x), atol=1e-10)

    def test_beliefs_normalized(self):
        p = random_instance(13)
        z = corrupt(sample(p, seed=0, size=6).x, 1.0, 1)
        _, _, state = bp.bp_denoise(p, z, return_state=True)
        for l in range(p.topology.L + 1):
            np.testing.assert_allclose(state.down[l].sum(-1), 1.0, atol=1e-12)
            np.testing.assert_allclose(state.up[l].sum(-1), 1.0, atol=1e-12)
            assert np.all(state.down[l] >= 0) and np.all(state.up[l] >= 0)
