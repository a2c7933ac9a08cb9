"""Small differentiable building blocks shared across the models."""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, RandomStream, Value


def glorot(rng: RandomStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit


class Linear:
    """Affine map on row-vector batches: x @ W + b."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: RandomStream):
        self.W = store.register(f"{name}.W", glorot(rng, d_in, d_out))
        self.b = store.register(f"{name}.b", np.zeros((1, d_out)))

    def __call__(self, x: Value) -> Value:
        return dc.add(dc.matmul(x, self.W), self.b)


class MLP:
    """Two-layer perceptron (tanh hidden), optionally softplus-squashed output.

    Besides the tape-building ``__call__`` it exposes a raw-array fast path
    (``em_value`` / ``em_vjp``) used by the fused SDE integrator.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        d_in: int,
        d_hidden: int,
        d_out: int,
        rng: RandomStream,
        out_softplus: bool = False,
    ):
        self.W1 = store.register(f"{name}.W1", glorot(rng, d_in, d_hidden))
        self.b1 = store.register(f"{name}.b1", np.zeros((1, d_hidden)))
        self.W2 = store.register(f"{name}.W2", glorot(rng, d_hidden, d_out))
        self.b2 = store.register(f"{name}.b2", np.zeros((1, d_out)))
        self.out_softplus = out_softplus

    def params(self) -> tuple[Value, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    def __call__(self, x: Value) -> Value:
        h = dc.tanh(dc.add(dc.matmul(x, self.W1), self.b1))
        out = dc.add(dc.matmul(h, self.W2), self.b2)
        if self.out_softplus:
            out = dc.softplus(out)
        return out

    # Fast path on raw arrays (used by the fused SDE integrator) --------------
    #
    # The adjoint sweep walks integration steps sequentially, but parameter
    # gradients are pure sums of per-step outer products, so em_step only
    # records rows and em_flush forms the gradients with batched matmuls.

    def em_value(self, z: np.ndarray) -> np.ndarray:
        a = np.tanh(z @ self.W1.data + self.b1.data)
        out = a @ self.W2.data + self.b2.data
        if self.out_softplus:
            out = np.logaddexp(0.0, out)
        return out

    def em_value_fn(self):
        """Step closure with parameter arrays hoisted (hot integration loops)."""
        W1, b1 = self.W1.data, self.b1.data
        W2, b2 = self.W2.data, self.b2.data
        dot, tanh = np.dot, np.tanh
        if self.out_softplus:
            logaddexp = np.logaddexp

            def fn(z):
                a = tanh(dot(z, W1) + b1)
                return logaddexp(0.0, dot(a, W2) + b2)

            return fn

        def fn(z):
            a = tanh(dot(z, W1) + b1)
            return dot(a, W2) + b2

        return fn

    def em_begin(self, z_stack: np.ndarray) -> dict:
        steps, m, _ = z_stack.shape
        flat = z_stack.reshape(steps * m, -1)
        a = np.tanh(flat @ self.W1.data + self.b1.data)
        cache = {
            "m": m,
            "z": flat,
            "a": a,
            "gout": np.empty((steps * m, self.W2.data.shape[1])),
            "dh1": np.empty_like(a),
        }
        if self.out_softplus:
            pre = a @ self.W2.data + self.b2.data
            cache["sig"] = 1.0 / (1.0 + np.exp(-pre))
        return cache

    def em_step(self, cache: dict, k: int, gout: np.ndarray) -> np.ndarray:
        m = cache["m"]
        lo = k * m
        hi = lo + m
        if self.out_softplus:
            gout = gout * cache["sig"][lo:hi]
        cache["gout"][lo:hi] = gout
        a = cache["a"][lo:hi]
        dh1 = (gout @ self.W2.data.T) * (1.0 - a * a)
        cache["dh1"][lo:hi] = dh1
        return dh1 @ self.W1.data.T

    def em_step_fn(self, cache: dict):
        """Adjoint step closure over a prepared cache (hot integration loops)."""
        m = cache["m"]
        W1T = self.W1.data.T
        W2T = self.W2.data.T
        a_buf, gout_buf, dh1_buf = cache["a"], cache["gout"], cache["dh1"]
        sig = cache.get("sig")
        dot = np.dot

        def fn(k, gout):
            lo = k * m
            hi = lo + m
            if sig is not None:
                gout = gout * sig[lo:hi]
            gout_buf[lo:hi] = gout
            a = a_buf[lo:hi]
            dh1 = dot(gout, W2T)
            dh1 *= 1.0 - a * a
            dh1_buf[lo:hi] = dh1
            return dot(dh1, W1T)

        return fn

    def em_flush(self, cache: dict, acc) -> None:
        acc(self.W2, cache["a"].T @ cache["gout"])
        acc(self.b2, cache["gout"].sum(axis=0, keepdims=True))
        acc(self.W1, cache["z"].T @ cache["dh1"])
        acc(self.b1, cache["dh1"].sum(axis=0, keepdims=True))


class ConstDiag:
    """State-independent diagonal map: softplus(w) broadcast over rows.

    Used as a cheap learnable diffusion term for the weight-evolution SDEs;
    ``em_constant`` lets the fused integrator pre-scale the whole noise array.
    """

    em_constant = True

    def __init__(self, store: ParamStore, name: str, dim: int, init: float = -2.0):
        self.w = store.register(f"{name}.w", np.full((1, dim), float(init)))

    def params(self) -> tuple[Value, ...]:
        return (self.w,)

    def __call__(self, x: Value) -> Value:
        rows = x.data.shape[0]
        g = dc.softplus(self.w)
        if rows == 1:
            return g
        return dc.mul(dc.constant(np.ones((rows, 1))), g)

    def em_value(self, z: np.ndarray) -> np.ndarray:
        g = np.logaddexp(0.0, self.w.data)
        return np.broadcast_to(g, z.shape)

    def em_flush_const(self, weighted_noise_sum: np.ndarray, acc) -> None:
        """weighted_noise_sum = sum over steps/rows of (adjoint * raw noise)."""
        sig = 1.0 / (1.0 + np.exp(-self.w.data))
        acc(self.w, weighted_noise_sum.sum(axis=0, keepdims=True) * sig)


class GRUCell:
    """Gated recurrent cell over row-vector states, gates fused into two matmuls.

    Update rule (reset applied after the hidden matmul):
      r = sig(gx_r + gh_r), u = sig(gx_u + gh_u), c = tanh(gx_c + r * gh_c)
      h' = u * c + (1 - u) * h
    so a saturated-closed update gate (u -> 0) leaves the state untouched.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, rng: RandomStream):
        self.Wx = store.register(f"{name}.Wx", glorot(rng, d_in, 3 * d_hidden))
        self.Wh = store.register(f"{name}.Wh", glorot(rng, d_hidden, 3 * d_hidden))
        self.bx = store.register(f"{name}.bx", np.zeros((1, 3 * d_hidden)))
        self.bh = store.register(f"{name}.bh", np.zeros((1, 3 * d_hidden)))
        self.d_hidden = d_hidden

    def __call__(self, x: Value, h: Value) -> Value:
        hd = self.d_hidden
        gx = dc.add(dc.matmul(x, self.Wx), self.bx)
        gh = dc.add(dc.matmul(h, self.Wh), self.bh)
        r = dc.sigmoid(dc.add(dc.col_slice(gx, 0, hd), dc.col_slice(gh, 0, hd)))
        u = dc.sigmoid(dc.add(dc.col_slice(gx, hd, 2 * hd), dc.col_slice(gh, hd, 2 * hd)))
        cand = dc.tanh(dc.add(dc.col_slice(gx, 2 * hd, 3 * hd), dc.mul(r, dc.col_slice(gh, 2 * hd, 3 * hd))))
        keep = dc.mul(dc.addc(dc.neg(u), 1.0), h)
        return dc.add(keep, dc.mul(u, cand))
