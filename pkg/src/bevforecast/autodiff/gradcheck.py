"""Central finite-difference checks for the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, arrays, eps=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + eps
            fp = fn(*arrays)
            a[i] = orig - eps
            fm = fn(*arrays)
            a[i] = orig
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the L2 sense, 0 when both vanish."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return 0.0 if den == 0.0 else num / den


def check_gradients(build, arrays, eps=1e-4):
    """Compare tape gradients with central differences.

    ``build`` maps Tensors to a scalar Tensor. Arrays must be float64.
    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def scalar(*arrs):
        return float(build(*[Tensor(x) for x in arrs]).data)

    numeric = numeric_grad(scalar, arrays, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
