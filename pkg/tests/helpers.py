"""Small data generators shared by the tests."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def blobs(rng, centers: dict[int, np.ndarray], n: int, noise: float = 0.3):
    """``n`` Gaussian points per label around each center, plus a bias column."""
    X, y = [], []
    for label, c in centers.items():
        pts = c + noise * rng.standard_normal((n, len(c)))
        X.append(np.hstack([pts, np.ones((n, 1))]))
        y += [label] * n
    return np.vstack(X), np.asarray(y)


def random_instance(rng, max_dim=20, max_n=50, scale=1.0):
    """Random sparse LR problem ``(w, X, y, C)`` with about 60% nonzeros."""
    d = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_n + 1))
    X = rng.standard_normal((n, d)) * (rng.random((n, d)) < 0.6)
    y = rng.choice([-1.0, 1.0], size=n)
    w = rng.standard_normal(d) * scale
    C = float(10 ** rng.uniform(-2, 2))
    return w, sp.csr_matrix(X), y, C


def central_difference(f, w, h=1e-5):
    g = np.zeros_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (f(w + e) - f(w - e)) / (2 * h)
    return g
