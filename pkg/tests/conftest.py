import numpy as np
import pytest

from ghmnet.ghm import generate_params
from ghmnet.topology import build

# small trees with d <= 8 leaves
SHAPES = [
    (1, [2]), (1, [3]), (1, [1]), (2, [2, 2]), (2, [2, 1]), (2, [1, 3]), (2, [3, 2]),
    (2, [2, 3]), (3, [2, 2, 2]), (3, [1, 2, 2]), (3, [2, 1, 2]), (2, [4, 2]),
]


def random_instance(seed, S=None, K=None, shapes=SHAPES, max_leaves=8, max_configs=10**7):
    """A random GHM with S in {2, 3}, d <= max_leaves and S <= K <= 8.

    Trees are restricted so that every node configuration can be enumerated
    (``S ** n_nodes <= max_configs``), which the denoising oracle needs.
    """
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 4)) if S is None else S
    K = float(rng.uniform(S, 8)) if K is None else K
    options = [
        (L, m) for L, m in shapes
        if int(np.prod(m)) <= max_leaves and S ** build(L, m).n_nodes <= max_configs
    ]
    L, m = options[int(rng.integers(len(options)))]
    return generate_params(build(L, m), S, K, seed=rng)


@pytest.fixture
def small_instances():
    return [random_instance(s) for s in range(50)]


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
