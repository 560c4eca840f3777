"""Sampling leaves by stochastic localization.

Runs dz = m_t(z) dt + dB from z = 0, where m_t is the exact posterior mean
given t x + B_t.  z_T / T concentrates on a draw from the leaf law.  The
script compares the empirical law of the rounded samples with the exact one.

    python demos/04_diffusion_sampling.py
"""

from ghmnet import DiffusionConfig, build, eval_recovery, generate_params, sample, sample_sde

params = generate_params(build(2, [2, 2]), S=2, K=4.0, seed=10)

direct = eval_recovery(params, sample(params, seed=11, size=5000).x)
print(f"direct sampling, n=5000: TV {direct.tv:.4f} (noise scale {direct.noise_scale:.4f})")

for T, N in [(5.0, 200), (20.0, 200), (20.0, 400)]:
    res = sample_sde(params, DiffusionConfig(T=T, N=N, n_samples=5000, seed=12))
    rec = eval_recovery(params, res.samples)
    print(f"SDE T={T:>4}, N={N}: TV {rec.tv:.4f}")
