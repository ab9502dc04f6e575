"""Central finite-difference gradient checking for the autodiff ops."""

import numpy as np

from cyclewalk.autodiff import Tensor


def numerical_grad(fn, arrays, index, eps=1e-5):
    """d fn(*arrays) / d arrays[index] by central differences; fn returns a float."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = fn(*arrays)
        x[i] = orig - eps
        lo = fn(*arrays)
        x[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check_grads(op, arrays, eps=1e-5, weights=None):
    """Max relative error over all inputs between autodiff and finite differences.

    The scalar objective is ``sum(weights * op(*inputs))`` with fixed random
    weights so every output entry contributes distinctly.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out0 = op(*[Tensor(a) for a in arrays]).data
    if weights is None:
        weights = np.random.default_rng(1234).standard_normal(out0.shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    (out * Tensor(weights)).sum().backward()
    worst = 0.0
    for k, t in enumerate(ts):
        num = numerical_grad(scalar, arrays, k, eps)
        worst = max(worst, rel_error(t.grad, num))
    return worst
