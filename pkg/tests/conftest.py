import sys

import numpy as np
import pytest


def random_orthonormal(rng, m, r):
    Q, _ = np.linalg.qr(rng.standard_normal((m, r)))
    return Q


def jacobi_singular_values(A, sweeps=100):
    """One-sided Jacobi SVD: rotate column pairs until mutually orthogonal."""
    W = np.array(A, dtype=np.float64, copy=True)
    n = W.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = W[:, i] @ W[:, i]
                b = W[:, j] @ W[:, j]
                c = W[:, i] @ W[:, j]
                if abs(c) <= 1e-15 * np.sqrt(a * b):
                    continue
                off = max(off, abs(c) / np.sqrt(a * b))
                zeta = (b - a) / (2 * c)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1 + zeta * zeta)) if zeta != 0 else 1.0
                cs = 1 / np.sqrt(1 + t * t)
                sn = cs * t
                wi, wj = W[:, i].copy(), W[:, j].copy()
                W[:, i] = cs * wi - sn * wj
                W[:, j] = sn * wi + cs * wj
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(W, axis=0))[::-1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
