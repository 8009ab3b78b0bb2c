import numpy as np
import pytest

from opsearch.tensor import Tensor


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def gradcheck(build, arrays, eps=1e-6):
    """Max relative error between autodiff and central-difference gradients.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def f(*arrs):
        return build(*[Tensor(x) for x in arrs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays], eps)
    return max(rel_err(x, y) for x, y in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
