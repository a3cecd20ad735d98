"""Shared test helpers: finite-difference oracles and tolerances."""

import numpy as np
import pytest

from kpp import autodiff as ad


def rel_err(a, b, floor=1.0):
    """Relative error with an absolute floor for near-zero references."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale))


def fd_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x, coordinate-wise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_op_gradient(build, inputs, rtol=1e-4, h=1e-5, seed=0):
    """Compare autodiff gradients of a random projection of `build(*tensors)`
    against finite differences, for every input array.

    build: callable taking ad.Tensor inputs, returning an output Tensor.
    inputs: list of numpy arrays (all treated as differentiable).
    """
    rng = np.random.default_rng(seed)
    tensors = [ad.parameter(x.copy()) for x in inputs]
    out = build(*tensors)
    proj = rng.normal(size=out.shape)
    loss = ad.sum_(ad.mul(out, ad.constant(proj)))
    ad.backward(loss)

    worst = 0.0
    for i, x in enumerate(inputs):
        def scalar(xv, i=i):
            args = [ad.constant(v.copy()) for v in inputs]
            args[i] = ad.constant(xv)
            o = build(*args)
            return float((o.data * proj).sum())

        g_fd = fd_grad(scalar, x, h=h)
        g_ad = tensors[i].grad
        assert g_ad is not None, f"input {i} received no gradient"
        worst = max(worst, rel_err(g_ad, g_fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
