"""Central finite-difference gradient oracle shared by the model tests."""
import numpy as np


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_check(params, analytic, loss_fn, h=1e-5, max_per_param=None, rng=None):
    """Worst relative error between ``analytic`` grads and central differences.

    ``loss_fn()`` reads the current values of ``params`` (modified in place).
    With ``max_per_param`` only that many random entries of each array are probed.
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            worst = max(worst, float(rel_err(gflat[i], (lp - lm) / (2 * h))))
    return worst
