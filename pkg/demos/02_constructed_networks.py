"""ReLU networks that reproduce BP by construction.

Every message update in the tree is a log-sum-exp against a small table.
Each one is replaced by a two-layer ReLU block built from piecewise-linear
approximations of exp and log.  Stacking the blocks along the tree gives a
ConvNet for classification and a U-Net for denoising.

    python demos/02_constructed_networks.py
"""

import itertools

import numpy as np

from ghmnet import (
    bp_classify, bp_denoise, build, construct_classifier, construct_denoiser, convnet_forward, corrupt,
    generate_params, sample, unet_forward,
)
from ghmnet.relu_approx import build_exp_approx, build_log_approx

# the scalar pieces
for delta in (0.1, 0.01):
    f, g = build_exp_approx(delta), build_log_approx(4.0, delta)
    u = np.linspace(-10, 0, 100_001)
    v = np.exp(np.linspace(-np.log(4), np.log(4), 100_001))
    print(f"delta={delta}: exp uses {f.M} units (error {np.abs(f(u) - np.exp(u)).max():.4f}), "
          f"log uses {g.M} units (error {np.abs(g(v) - np.log(v)).max():.4f})")

params = generate_params(build(2, [2, 2]), S=2, K=4.0, seed=5)
x = np.array(list(itertools.product([1, 2], repeat=4)), dtype=float)
print("\nclassification, all 16 leaf configurations:")
for delta in (1.0, 0.5, 0.25):
    net = construct_classifier(params, delta)
    err = np.abs(np.log(convnet_forward(net, x)) - np.log(bp_classify(params, x))).max()
    print(f"  delta={delta:<5} width D={net.D:>6}  widest block {max(net.max_block_widths()):>5}  "
          f"max log-posterior error {err:.2e}")

params = generate_params(build(2, [2, 1]), S=2, K=4.0, seed=6)
rng = np.random.default_rng(0)
z = corrupt(sample(params, rng, size=500).x, 1.0, rng)
net = construct_denoiser(params, 0.5)
err = np.abs(unet_forward(net, z) - bp_denoise(params, z)[1]).max()
print(f"\ndenoising on 500 noisy draws: width D={net.D}, max posterior-mean error {err:.2e}")
