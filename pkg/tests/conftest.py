import numpy as np
import pytest

from fedsel import nn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(params, specs, batch, targets, cfg, seed=None, step=1e-5):
    """Central finite differences of the total loss over every flat parameter."""
    flat = params.flatten()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        rng_u = None if seed is None else np.random.default_rng(seed)
        rng_d = None if seed is None else np.random.default_rng(seed)
        lu, _ = nn.loss_and_grad(nn.ModelParams.unflatten(up, params), specs, batch, targets,
                                 cfg, rng_u)
        ld, _ = nn.loss_and_grad(nn.ModelParams.unflatten(dn, params), specs, batch, targets,
                                 cfg, rng_d)
        g[i] = (lu - ld) / (2 * step)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
