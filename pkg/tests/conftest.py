import numpy as np
import pytest

from connectoflow import diffcore as dc


def flatten_params(params):
    return np.concatenate([p.data.ravel() for p in params])


def set_params(params, flat):
    off = 0
    for p in params:
        n = p.data.size
        p.data = np.ascontiguousarray(flat[off : off + n].reshape(p.data.shape))
        off += n


def numeric_gradient(loss_fn, params, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. the given leaf Values."""
    base = flatten_params(params)
    grad = np.zeros_like(base)
    for i in range(base.size):
        bump = base.copy()
        bump[i] = base[i] + h
        set_params(params, bump)
        up = loss_fn()
        bump[i] = base[i] - h
        set_params(params, bump)
        down = loss_fn()
        grad[i] = (up - down) / (2.0 * h)
    set_params(params, base)
    return grad


def analytic_gradient(loss_value_fn, params):
    for p in params:
        p.grad = None
    loss = loss_value_fn()
    dc.backward(loss)
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]
    )


def check_gradients(build_loss, params, rtol=1e-4, h=1e-5):
    """Assert analytic vs central-difference gradients agree within rtol."""
    ana = analytic_gradient(build_loss, params)
    num = numeric_gradient(lambda: build_loss().item(), params, h=h)
    scale = np.maximum(np.abs(num), np.maximum(np.abs(ana), 1e-6))
    rel = np.abs(ana - num) / scale
    assert rel.max() < rtol, f"max rel gradient error {rel.max():.3e} exceeds {rtol}"
    return rel.max()


@pytest.fixture
def rng():
    return dc.RandomStream(1234)
