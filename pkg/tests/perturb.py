"""Deterministic perturbations of the exact message maps."""

import numpy as np

from ghmnet import mp


class Perturbed:
    """``fn`` plus a deterministic perturbation of sup norm at most ``delta``."""

    def __init__(self, fn, delta):
        self.fn, self.delta = fn, delta

    def __call__(self, h):
        out = self.fn(h)
        phase = np.asarray(h, float).reshape(len(out), -1).sum(axis=1, keepdims=True)
        return out + self.delta * np.cos(3.0 * phase + np.arange(out.shape[1]))


def classify_root_deviation(p, delta, x):
    exact = mp.amp_run(p.topology, p.S, mp.exact_fns(p, mp.CLASSIFY), x, mp.CLASSIFY)
    fns = {k: Perturbed(f, delta) for k, f in mp.exact_fns(p, mp.CLASSIFY).items()}
    approx = mp.amp_run(p.topology, p.S, fns, x, mp.CLASSIFY)
    return np.abs(exact.h_down[0] - approx.h_down[0]).max()


def denoise_leaf_deviation(p, delta, z):
    exact = mp.amp_run(p.topology, p.S, mp.exact_fns(p, mp.DENOISE), z, mp.DENOISE)
    fns = {k: Perturbed(f, delta) for k, f in mp.exact_fns(p, mp.DENOISE).items()}
    approx = mp.amp_run(p.topology, p.S, fns, z, mp.DENOISE)
    return np.abs(exact.mean - approx.mean).max()
