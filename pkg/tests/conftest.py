import numpy as np
import pytest


def random_hurwitz(rng: np.random.Generator, d: int) -> np.ndarray:
    """Random matrix whose spectrum has uniformly positive real part.

    Symmetric-positive-definite plus skew keeps the field of values in the
    right half plane, so the construction never needs rejection.
    """
    G = rng.standard_normal((d, d))
    Q, _ = np.linalg.qr(G)
    S = Q @ np.diag(rng.uniform(0.3, 3.0, size=d)) @ Q.T
    W = rng.standard_normal((d, d))
    return S + 0.5 * (W - W.T)


def random_diffusion(rng: np.random.Generator, d: int) -> np.ndarray:
    """Random d-by-d noise matrix, occasionally rank deficient."""
    D = rng.standard_normal((d, d))
    if d > 1 and rng.random() < 0.3:
        D[:, rng.integers(0, d)] = 0.0
    return D


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)
