"""Training a U-Net denoiser from samples.

Fits a width-32 U-Net by projected gradient descent on the square loss for
growing sample sizes.  Reports the Bayes gap, i.e. the mean squared distance
between the network output and the exact posterior mean.

    python demos/03_training.py
"""

from ghmnet import TrainConfig, build, d2_denoise, fit, generate_params, random_init

params = generate_params(build(2, [2, 2]), S=2, K=4.0, seed=7)
init = random_init(params.topology, params.S, D=32, scale=0.3, seed=8)
gap0 = d2_denoise(init, params, 4000, seed=9)
print(f"random init: Bayes gap {gap0.value:.4f} +/- {gap0.stderr:.4f}")

for n in (100, 1000, 10_000):
    w, log = fit(params, TrainConfig("denoise", n, step_size=3.0, iterations=200, seed=n), init)
    gap = d2_denoise(w, params, 4000, seed=9)
    print(f"n={n:>6}: risk {log.initial_risk:.4f} -> {log.final_risk:.4f}, "
          f"Bayes gap {gap.value:.4f} +/- {gap.stderr:.4f}")
