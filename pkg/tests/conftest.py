import numpy as np
import pytest

from lowrank_mcr.model import FactorParams, MatrixDataset


def random_dataset(rng, n=60, m=2, p=3, q=3, family="normal", eta=None, gamma=0.3, noise=1.0):
    z = rng.standard_normal((n, m)) if m else None
    mats = rng.standard_normal((n, p, q))
    eta = rng.standard_normal((p, q)) * 0.5 if eta is None else eta
    xi = rng.standard_normal(m) * 0.5
    u = gamma + np.einsum("ipq,pq->i", mats, eta)
    if m:
        u = u + z @ xi
    if family == "normal":
        y = u + noise * rng.standard_normal(n)
    else:
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-u))).astype(float)
    return MatrixDataset(y=y, mats=mats, z=z)


def random_theta(rng, m=2, p=3, q=3, r=2, scale=1.0):
    return FactorParams(
        gamma=float(rng.standard_normal()),
        xi=rng.standard_normal(m),
        a=scale * rng.standard_normal((p, r)),
        b=scale * rng.standard_normal((q, r)),
    )


def random_nonsingular(rng, r):
    while True:
        c = rng.standard_normal((r, r))
        if np.linalg.cond(c) < 20:
            return c


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
