"""Central finite-difference gradient oracle shared by the test modules."""

import numpy as np

from diarkit import tensor as T


def numeric_grads(f, arrays, h=1e-4):
    """Central differences of scalar f() with respect to each array entry.

    f closes over `arrays` and is re-evaluated after in-place perturbation,
    so it must not cache values derived from them.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_match(build_loss, arrays, h=1e-4, rtol=1e-4, atol=1e-7):
    """Check autodiff grads of build_loss(*leaf_tensors) against the oracle."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*leaves)
    T.backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad.copy()
                for a, t in zip(arrays, leaves)]

    def f():
        return float(build_loss(*[T.Tensor(a) for a in arrays]).data)

    numeric = numeric_grads(f, arrays, h=h)
    for got, want in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), atol / rtol)
        rel = np.abs(got - want) / denom
        assert rel.max() < rtol, f"gradient mismatch: max rel err {rel.max():.3e}"
