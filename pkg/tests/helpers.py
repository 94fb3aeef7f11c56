"""Shared test utilities."""

import numpy as np

from flowadapt.seeding import derive_rng


def two_moons(n, seed, noise=0.08):
    """Classic interleaved half-circles in 2-d; a fixed non-Gaussian target."""
    rng = derive_rng(seed, "two-moons")
    t = rng.uniform(0, np.pi, n)
    which = rng.integers(0, 2, n)
    x = np.where(which == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(which == 0, np.sin(t), 0.5 - np.sin(t))
    return np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))


def rel_err(a, b):
    """Relative error with the floor-at-1e-8 denominator used across the suite."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.max(np.abs(a - b) / denom)


def param_bytes(model):
    return b"".join(p.data.tobytes()
                    for _, p in sorted(model.named_parameters().items()))
