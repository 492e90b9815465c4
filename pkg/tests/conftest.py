import numpy as np

import cdsrec.numeric as nm


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, entry by entry."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck(build_loss, x0: np.ndarray, h: float = 1e-4, tol: float = 1e-4) -> float:
    """Compare tape gradients of build_loss(Tensor) against central differences.

    Returns the worst relative error; asserts it stays below tol.
    """
    t = nm.Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(t)
    nm.backward(loss)
    analytic = t.grad.copy()

    def f(arr):
        return build_loss(nm.Tensor(arr)).item()

    numeric = central_difference(f, x0, h=h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst < tol, f"worst relative gradient error {worst:.3e} >= {tol}"
    return worst
