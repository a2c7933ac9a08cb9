"""Optional numba kernels for the Euler-Maruyama hot loops.

The interpreter-level fused path in ``sdesolve`` stays the reference
implementation; these kernels compute the same recurrences on flattened
row-vector states for the common training cases (MLP drift with zero noise
or a constant diagonal diffusion). Everything degrades gracefully to the
numpy path when numba is unavailable.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def em_mlp_forward(z0, W1, b1, W2, b2, h, steps, noise_term, has_noise):
    """Unrolled EM steps with a tanh-MLP drift; returns (states, z, bad_step)."""
    dim = z0.shape[0]
    hid = W1.shape[1]
    states = np.empty((steps, dim))
    z = z0.copy()
    a = np.empty(hid)
    tmp = np.empty(dim)
    for k in range(steps):
        for i in range(dim):
            states[k, i] = z[i]
        for j in range(hid):
            a[j] = b1[j]
        for i in range(dim):
            zi = z[i]
            for j in range(hid):
                a[j] += zi * W1[i, j]
        for j in range(hid):
            a[j] = math.tanh(a[j])
        for i in range(dim):
            tmp[i] = b2[i]
        for j in range(hid):
            aj = a[j]
            for i in range(dim):
                tmp[i] += aj * W2[j, i]
        total = 0.0
        if has_noise:
            for i in range(dim):
                z[i] = z[i] + h * tmp[i] + noise_term[k, i]
                total += z[i]
        else:
            for i in range(dim):
                z[i] = z[i] + h * tmp[i]
                total += z[i]
        if not math.isfinite(total):
            return states, z, k
    return states, z, -1


@njit(cache=True)
def em_mlp_chain(activations, W1, W2, h, noise, g, want_noise_weight):
    """Sequential adjoint chain; parameter grads are left to batched matmuls.

    Returns (dz0, dh1_stack, gout_stack, noise_weight): the caller forms
    dW1 = states^T @ dh1_stack and dW2 = activations^T @ gout_stack.
    """
    steps, hid = activations.shape
    dim = W1.shape[0]
    dh1_stack = np.empty((steps, hid))
    gout_stack = np.empty((steps, dim))
    nw = np.zeros(dim)
    dz = g.copy()
    for k in range(steps - 1, -1, -1):
        if want_noise_weight:
            for i in range(dim):
                nw[i] += dz[i] * noise[k, i]
        for i in range(dim):
            gout_stack[k, i] = h * dz[i]
        gout = gout_stack[k]
        a = activations[k]
        for j in range(hid):
            s = 0.0
            for i in range(dim):
                s += gout[i] * W2[j, i]
            dh1_stack[k, j] = s * (1.0 - a[j] * a[j])
        dh1 = dh1_stack[k]
        for i in range(dim):
            s = 0.0
            for j in range(hid):
                s += dh1[j] * W1[i, j]
            dz[i] += s
    return dz, dh1_stack, gout_stack, nw
