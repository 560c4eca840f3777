import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from ghmnet import bp
from ghmnet.errors import ConfigurationError, DivergenceError, InvalidSampleError
from ghmnet.ghm import copy_chain_params, generate_params
from ghmnet.nets import CONVNET, UNET, construct_classifier, random_init
from ghmnet.topology import build
from ghmnet.train import (
    Batch, TrainConfig, d2_classify, d2_denoise, empirical_risk, fit, gradient, loss_classify,
    loss_denoise, make_batch,
)

from gradcheck import check_coordinates


class TestLosses:
    def test_classify(self):
        assert loss_classify([0.0, 1.0], 2) == 0.0
        assert loss_classify([0.5, 0.5], 1) == pytest.approx(0.5)
        assert loss_classify([1.0, 0.0, 0.0], 3) == pytest.approx(2.0)

    def test_classify_bounded(self):
        p = np.random.default_rng(0).dirichlet(np.ones(4), size=1000)
        y = np.random.default_rng(1).integers(1, 5, size=1000)
        assert loss_classify(p, y).max() <= 2.0

    def test_denoise(self):
        assert loss_denoise([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert loss_denoise([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)

    def test_denoise_shape(self):
        with pytest.raises(InvalidSampleError):
            loss_denoise([1.0, 2.0], [1.0])


class TestGradient:
    @pytest.mark.parametrize("kind", [CONVNET, UNET])
    def test_finite_differences(self, kind):
        p = generate_params(build(2, [2, 2]), 2, 4.0, seed=0)
        net = random_init(p.topology, 2, 6, 0.5, seed=1, kind=kind)
        batch = make_batch(p, "classify" if kind == CONVNET else "denoise", 40, seed=2)
        _, grad = gradient(net, batch)
        smooth, failures = check_coordinates(net, grad, batch, 40, seed=3)
        assert smooth >= 40
        assert failures == []

    def test_small_tree(self):
        p = generate_params(build(1, [2]), 2, 3.0, seed=0)
        net = random_init(p.topology, 2, 4, 0.7, seed=4, kind=CONVNET)
        batch = make_batch(p, "classify", 30, seed=5)
        _, grad = gradient(net, batch)
        smooth, failures = check_coordinates(net, grad, batch, 20, seed=6)
        assert smooth >= 20 and failures == []

    def test_risk_matches_forward(self):
        p = generate_params(build(2, [2, 1]), 2, 4.0, seed=0)
        net = random_init(p.topology, 2, 5, 0.5, seed=1, kind=UNET)
        batch = make_batch(p, "denoise", 30, seed=2)
        risk, _ = gradient(net, batch)
        assert risk == pytest.approx(empirical_risk(net, batch), abs=1e-15)

    def test_zero_residual_gives_zero_gradient(self):
        # zero weights predict the per-leaf likelihood mean; use it as the target
        p = generate_params(build(2, [2, 1]), 2, 4.0, seed=0)
        net = random_init(p.topology, 2, 5, 0.0, kind=UNET)
        z = np.random.default_rng(0).normal(1.5, 1.0, size=(20, 2))
        from ghmnet.nets import unet_forward

        batch = Batch(z, unet_forward(net, z))
        risk, grad = gradient(net, batch)
        assert risk == 0.0
        for blk in grad.blocks.values():
            for G in blk:
                np.testing.assert_array_equal(G, 0.0)

    def test_shared_block_accumulates_over_nodes(self):
        # (2,[2,1]) on symmetric input runs the layer-2 block at two identical nodes.
        # (2,[1,1]) with the layer-1 block doubled gives the same forward pass with
        # one layer-2 node, whose upstream gradient is the sum of the two.
        S, D = 2, 5
        wide = random_init(build(2, [2, 1]), S, D, 0.6, seed=7, kind=CONVNET)
        wide.blocks[("down", 1, 1)] = wide.blocks[("down", 1, 0)]
        narrow = random_init(build(2, [1, 1]), S, D, 0.6, seed=7, kind=CONVNET)
        W1, W2, W3 = wide.blocks[("down", 1, 0)]
        narrow.blocks[("down", 1, 0)] = (2 * W1, W2, W3)
        narrow.blocks[("down", 2, 0)] = wide.blocks[("down", 2, 0)]
        a = np.array([[1.0], [2.0], [2.0]])
        y = np.array([1, 2, 1])
        _, g_wide = gradient(wide, Batch(np.hstack([a, a]), y))
        _, g_narrow = gradient(narrow, Batch(a, y))
        for G, H in zip(g_wide.blocks[("down", 2, 0)], g_narrow.blocks[("down", 2, 0)]):
            np.testing.assert_allclose(G, H, atol=1e-14)

    def test_empty_batch(self):
        net = random_init(build(1, [2]), 2, 3, 0.1, kind=UNET)
        with pytest.raises(ConfigurationError):
            gradient(net, Batch(np.zeros((0, 2)), np.zeros((0, 2))))


class TestFit:
    def test_zero_iterations_returns_init(self):
        p = generate_params(build(1, [2]), 2, 3.0, seed=0)
        init = random_init(p.topology, 2, 4, 0.3, seed=1, kind=UNET)
        w, log = fit(p, TrainConfig("denoise", 50, 0.1, 0), init)
        assert w is init
        assert len(log.rows) == 1

    def test_risk_does_not_increase(self):
        p = generate_params(build(2, [2, 2]), 2, 4.0, seed=0)
        init = random_init(p.topology, 2, 8, 0.3, seed=1, kind=UNET)
        w, log = fit(p, TrainConfig("denoise", 500, 1.0, 30), init)
        assert log.final_risk <= log.initial_risk
        assert log.final_risk < log.initial_risk or log.early_stopped

    def test_constructed_init_is_not_made_worse(self):
        p = generate_params(build(1, [2]), 2, 3.0, seed=0)
        net = construct_classifier(p, 0.5)
        batch = make_batch(p, "classify", 300, seed=1)
        before = empirical_risk(net, batch)
        bayes = float(((np.eye(2)[batch.targets - 1] - bp.bp_classify(p, batch.inputs)) ** 2).sum(-1).mean())
        # log-ratio within delta bounds the probability gap by e^delta - 1
        assert abs(before - bayes) <= 2 * (np.exp(0.5) - 1)
        w, log = fit(p, TrainConfig("classify", 300, 0.01, 3), net, batch=batch)
        assert empirical_risk(w, batch) <= before

    def test_training_beats_random_init(self):
        p = generate_params(build(1, [1]), 2, 4.0, seed=3)
        init = random_init(p.topology, 2, 8, 0.5, seed=4, kind=CONVNET)
        w, _ = fit(p, TrainConfig("classify", 1000, 2.0, 100, seed=5), init)
        assert d2_classify(w, p).value < d2_classify(init, p).value

    def test_projection_keeps_budget(self):
        p = generate_params(build(1, [2]), 2, 3.0, seed=0)
        init = random_init(p.topology, 2, 6, 0.3, seed=1, kind=UNET)
        w, _ = fit(p, TrainConfig("denoise", 200, 5.0, 10, B=0.8), init)
        assert w.norm() <= 0.8 + 1e-9

    def test_divergence(self):
        # square-loss risks are bounded, so a tight factor is needed to trip the guard
        p = generate_params(build(2, [2, 2]), 2, 4.0, seed=0)
        init = random_init(p.topology, 2, 8, 0.3, seed=1, kind=CONVNET)
        with pytest.raises(DivergenceError) as exc:
            fit(p, TrainConfig("classify", 200, 1e4, 20, divergence_factor=1.01), init)
        assert exc.value.log.rows

    def test_wrong_network(self):
        p = generate_params(build(1, [2]), 2, 3.0, seed=0)
        init = random_init(p.topology, 2, 4, 0.3, kind=CONVNET)
        with pytest.raises(ConfigurationError):
            fit(p, TrainConfig("denoise", 10, 0.1, 1), init)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig("denoise", 0, 0.1, 1)
        with pytest.raises(ConfigurationError):
            TrainConfig("regress", 10, 0.1, 1)

    def test_log_csv(self, tmp_path):
        p = generate_params(build(1, [2]), 2, 3.0, seed=0)
        init = random_init(p.topology, 2, 4, 0.3, seed=1, kind=UNET)
        _, log = fit(p, TrainConfig("denoise", 20, 0.1, 3, eval_every=1, eval_n=50), init)
        path = tmp_path / "log.csv"
        log.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,risk,d2,d2_stderr,wall_clock"
        assert len(lines) == 5


class TestD2:
    def test_self_distance(self):
        p = generate_params(build(2, [2, 2]), 2, 4.0, seed=0)
        assert d2_classify(lambda x: bp.bp_classify(p, x), p).value <= 1e-12
        est = d2_denoise(lambda z, s2: bp.bp_denoise(p, z, s2)[1], p, 500, seed=0)
        assert est.value <= 1e-12

    def test_uniform_classifier_on_copy_chain(self):
        p = copy_chain_params(build(2, [2, 2]), 2)
        est = d2_classify(lambda x: np.full((len(x), 2), 0.5), p)
        assert est.exact
        assert est.value == pytest.approx(0.5, abs=1e-12)

    def test_constant_denoiser_variance(self):
        # single uniform leaf: E[(1.5 - m*(z))^2] by quadrature
        p = generate_params(build(1, [1]), 2, 2.0, mode="uniform")
        mstar = lambda z: 1 + expit(z - 1.5)
        dens = lambda z: 0.5 * (norm.pdf(z - 1) + norm.pdf(z - 2))
        exact, _ = integrate.quad(lambda z: (1.5 - mstar(z)) ** 2 * dens(z), -np.inf, np.inf)
        est = d2_denoise(lambda z, s2: np.full(z.shape, 1.5), p, 200_000, seed=1)
        assert abs(est.value - exact) <= 4 * est.stderr

    def test_constructed_gap_shrinks_with_delta(self):
        p = generate_params(build(1, [3]), 2, 4.0, seed=2)
        vals = [d2_classify(construct_classifier(p, d), p).value for d in (1.0, 0.5, 0.25)]
        assert vals[0] >= vals[1] >= vals[2]
