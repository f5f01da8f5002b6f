import numpy as np

from gazelab.tensorcore import Tensor


def numeric_grad(f, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f(ndarray)`` at ``x0``."""
    x = x0.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def analytic_grad(build, x0: np.ndarray) -> np.ndarray:
    x = Tensor(x0.copy(), requires_grad=True)
    build(x).backward()
    return x.grad if x.grad is not None else np.zeros_like(x0)


def max_rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def scaled_err(a: np.ndarray, n: np.ndarray) -> float:
    """Largest deviation relative to the gradient's largest component."""
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-300))


def gradcheck(build, x0: np.ndarray, eps: float = 1e-6, norm: str = "element") -> float:
    """Max relative error between analytic and central-difference gradients.

    ``norm="element"`` divides each component by its own magnitude; ``"max"``
    divides by the largest component, which keeps finite-difference roundoff on
    near-zero entries of deep compositions from dominating.
    """
    a = analytic_grad(build, x0)
    n = numeric_grad(lambda v: build(Tensor(v)).item(), x0, eps)
    return max_rel_err(a, n) if norm == "element" else scaled_err(a, n)
