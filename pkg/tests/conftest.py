import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i][p] * b[p][j]
            out[i][j] = acc
    return np.array(out)


def eig_best_rank_residual(a, r):
    """Eckart-Young residual from the eigenvalues of a^T a."""
    evals = np.linalg.eigvalsh(a.T @ a)[::-1]
    evals = np.clip(evals, 0.0, None)
    return float(np.sqrt(np.sum(evals[r:])))


def eig_best_rank_approx(a, r):
    """Best rank-r approximation built from the eigenvectors of a^T a."""
    evals, evecs = np.linalg.eigh(a.T @ a)
    order = np.argsort(evals)[::-1][:r]
    v = evecs[:, order]
    return a @ v @ v.T


def scalar_fake_quant(x, bits):
    """Per-element reference of min/max asymmetric quantization."""
    import math

    flat = [float(v) for v in np.ravel(x)]
    lo, hi = min(min(flat), 0.0), max(max(flat), 0.0)
    qmax = 2**bits - 1
    s = max((hi - lo) / qmax, 1e-8)

    def rnd(v):
        return math.copysign(math.floor(abs(v) + 0.5), v)

    z = min(max(rnd(-lo / s), 0), qmax)
    out = [s * (min(max(rnd(v / s) + z, 0), qmax) - z) for v in flat]
    return np.array(out).reshape(np.shape(x)), s, z


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
