import numpy as np


def rel_err(a, b, floor=1e-8):
    """Elementwise relative error with the denominator clamped at ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)
