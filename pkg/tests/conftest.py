"""Shared oracles: central finite differences and dense reference attention.

These stay independent of the library's backward rules and sparse gather paths
so gradient and equivalence tests actually check something.
"""

import numpy as np
import pytest

from longlab.tensor import Tape, Tensor, backward


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for ai, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f(*arrays)
            flat[i] = keep - h
            down = f(*arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradients(build, arrays):
    """Tape gradients of the scalar produced by build(*tensors)."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
        backward(tape, loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradients(build, arrays, rtol=1e-4, atol=1e-7, h=1e-5):
    """Compare tape gradients against central differences of the same scalar."""
    analytic = analytic_gradients(build, arrays)

    def scalar(*arrs):
        tensors = [Tensor(a) for a in arrs]
        return build(*tensors).item()

    numeric = finite_difference(scalar, [a.copy() for a in arrays], h=h)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


def dense_attention_reference(q, k, v, allowed, scale):
    """Plain numpy masked attention: softmax(scale * QK^T | allowed) V."""
    scores = scale * (q @ k.T)
    scores = np.where(allowed, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e = np.where(allowed, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    return p @ v


@pytest.fixture
def rng():
    return np.random.default_rng(0)
