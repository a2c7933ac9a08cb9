"""Dense float64 matrix core: reverse-mode autodiff, AdamW, seeded RNG, CSV I/O.

Every differentiable quantity is a 2-D float64 matrix wrapped in a ``Value``
node. Scalars are 1x1 matrices. Gradients accumulate across ``backward``
calls and are cleared explicitly by the optimizer step (or ``zero_grad``),
never implicitly.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's contract (e.g. non-scalar backward root)."""


class TrainingError(RuntimeError):
    """Optimizer step encountered an unusable gradient; carries the parameter name."""


def as_matrix(data) -> Array:
    """Coerce scalars / 1-D / 2-D input to a contiguous float64 matrix."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Value:
    """A node in the reverse-mode tape: a matrix, its gradient, and its parents.

    ``grad`` is lazily allocated (``None`` means all-zeros). ``const`` nodes
    are leaves excluded from gradient accumulation.
    """

    __slots__ = ("data", "grad", "const", "_parents", "_bw")

    def __init__(self, data: Array, parents: tuple = (), bw=None, const: bool = False):
        self.data = data
        self.grad: Array | None = None
        self.const = const
        self._parents = parents
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 value, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, const={self.const})"

    # Operator sugar; the module-level functions are the canonical API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def leaf(data) -> Value:
    """A differentiable leaf (parameter or input requiring gradient)."""
    return Value(as_matrix(data))


def constant(data) -> Value:
    """A non-differentiable leaf; gradients are never accumulated into it."""
    return Value(as_matrix(data), const=True)


def _coerce(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _check_broadcast(sa, sb, op: str) -> None:
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Value:
    """Matrix product with adjoints g @ b^T and a^T @ g."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def bw(g, acc):
        acc(a, g @ bd.T)
        acc(b, ad.T @ g)

    return Value(ad @ bd, (a, b), bw)


def add(a, b) -> Value:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data.shape, b.data.shape, "add")

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return Value(a.data + b.data, (a, b), bw)


def mul(a, b) -> Value:
    """Elementwise (Hadamard) product; row/column vectors broadcast."""
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data.shape, b.data.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g, acc):
        acc(a, _unbroadcast(g * bd, ad.shape))
        acc(b, _unbroadcast(g * ad, bd.shape))

    return Value(ad * bd, (a, b), bw)


def neg(a) -> Value:
    a = _coerce(a)

    def bw(g, acc):
        acc(a, -g)

    return Value(-a.data, (a,), bw)


def scale(a, s: float) -> Value:
    """Multiply by a Python float (non-differentiable in s)."""
    a = _coerce(a)
    s = float(s)

    def bw(g, acc):
        acc(a, g * s)

    return Value(a.data * s, (a,), bw)


def addc(a, c: float) -> Value:
    """Add a Python float to every entry."""
    a = _coerce(a)
    c = float(c)

    def bw(g, acc):
        acc(a, g)

    return Value(a.data + c, (a,), bw)


def sigmoid(a) -> Value:
    a = _coerce(a)
    out = np.empty_like(a.data)
    np.negative(np.abs(a.data), out=out)
    np.exp(out, out=out)
    # stable: sigma(x) = e^{-|x|}/(1+e^{-|x|}) for x<0, 1/(1+e^{-x}) for x>=0
    pos = a.data >= 0
    out = np.where(pos, 1.0 / (1.0 + out), out / (1.0 + out))

    def bw(g, acc):
        acc(a, g * out * (1.0 - out))

    return Value(out, (a,), bw)


def tanh(a) -> Value:
    a = _coerce(a)
    out = np.tanh(a.data)

    def bw(g, acc):
        acc(a, g * (1.0 - out * out))

    return Value(out, (a,), bw)


def relu(a) -> Value:
    a = _coerce(a)
    out = np.maximum(a.data, 0.0)

    def bw(g, acc):
        acc(a, g * (a.data > 0))

    return Value(out, (a,), bw)


def softplus(a) -> Value:
    """log(1 + e^x), computed stably; derivative is sigmoid(x)."""
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g, acc):
        acc(a, g / (1.0 + np.exp(-a.data)))

    return Value(out, (a,), bw)


def log(a) -> Value:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive entries")

    def bw(g, acc):
        acc(a, g / a.data)

    return Value(np.log(a.data), (a,), bw)


def exp(a) -> Value:
    a = _coerce(a)
    out = np.exp(a.data)

    def bw(g, acc):
        acc(a, g * out)

    return Value(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Value:
    """Clamp entries to [lo, hi]; gradient passes only through the interior."""
    a = _coerce(a)
    out = np.clip(a.data, lo, hi)
    interior = (a.data > lo) & (a.data < hi)

    def bw(g, acc):
        acc(a, g * interior)

    return Value(out, (a,), bw)


def transpose(a) -> Value:
    a = _coerce(a)

    def bw(g, acc):
        acc(a, g.T)

    return Value(a.data.T, (a,), bw)


def reshape(a, rows: int, cols: int) -> Value:
    a = _coerce(a)
    if rows * cols != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} to ({rows}, {cols})")
    shape = a.data.shape

    def bw(g, acc):
        acc(a, g.reshape(shape))

    return Value(a.data.reshape(rows, cols), (a,), bw)


def sum_all(a) -> Value:
    a = _coerce(a)
    shape = a.data.shape

    def bw(g, acc):
        acc(a, np.full(shape, g[0, 0]))

    return Value(np.array([[a.data.sum()]]), (a,), bw)


def mean_all(a) -> Value:
    a = _coerce(a)
    n = a.data.size
    shape = a.data.shape

    def bw(g, acc):
        acc(a, np.full(shape, g[0, 0] / n))

    return Value(np.array([[a.data.mean()]]), (a,), bw)


def col_mean(a) -> Value:
    """Column means as a 1xN row."""
    a = _coerce(a)
    m = a.data.shape[0]

    def bw(g, acc):
        acc(a, np.repeat(g / m, m, axis=0))

    return Value(a.data.mean(axis=0, keepdims=True), (a,), bw)


def col_max(a) -> Value:
    """Column maxima as a 1xN row; gradient routes to the first argmax per column."""
    a = _coerce(a)
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.data.shape[1])

    def bw(g, acc):
        buf = np.zeros_like(a.data)
        buf[idx, cols] = g[0]
        acc(a, buf)

    return Value(a.data[idx, cols][None, :], (a,), bw)


def col_slice(a, lo: int, hi: int) -> Value:
    """Columns [lo, hi); backward pads the complement with zeros."""
    a = _coerce(a)
    shape = a.data.shape
    if not 0 <= lo < hi <= shape[1]:
        raise ShapeError(f"col_slice [{lo}, {hi}) out of range for shape {shape}")

    def bw(g, acc):
        buf = np.zeros(shape)
        buf[:, lo:hi] = g
        acc(a, buf)

    return Value(np.ascontiguousarray(a.data[:, lo:hi]), (a,), bw)


def gather_rows(a, indices) -> Value:
    """Select rows by index (repeats allowed); backward scatter-adds."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.data.shape

    def bw(g, acc):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        acc(a, buf)

    return Value(a.data[idx], (a,), bw)


def concat_cols(parts: Sequence) -> Value:
    parts = [_coerce(p) for p in parts]
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols requires equal row counts")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[:, lo:hi])

    return Value(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def concat_rows(parts: Sequence) -> Value:
    parts = [_coerce(p) for p in parts]
    cols = parts[0].data.shape[1]
    if any(p.data.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows requires equal column counts")
    heights = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def bw(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[lo:hi, :])

    return Value(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def dropout(a, rate: float, rng: "RandomStream") -> Value:
    """Inverted dropout with a mask drawn from the seeded stream."""
    a = _coerce(a)
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.uniform(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(keep))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(node) into every reachable node's ``grad``.

    Repeated calls without resetting gradients add up (two calls -> exactly
    twice the single-pass gradient).
    """
    if loss.data.shape != (1, 1):
        raise ContractError(f"backward requires a scalar (1x1) loss, got {loss.data.shape}")

    # Iterative postorder topological sort (SDE unrolls can be deep).
    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, Array] = {id(loss): np.ones((1, 1))}

    def acc(parent: Value, contrib: Array) -> None:
        if parent.const:
            return
        pid = id(parent)
        cur = adjoint.get(pid)
        adjoint[pid] = contrib if cur is None else cur + contrib

    for node in reversed(topo):
        g = adjoint.get(id(node))
        if g is None:
            continue
        if not node.const:
            node.grad = g if node.grad is None else node.grad + g
        if node._bw is not None:
            node._bw(g, acc)


# ---------------------------------------------------------------------------
# Parameter store + AdamW
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with per-parameter Adam moments and step counts."""

    def __init__(self):
        self._params: dict[str, Value] = {}
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}
        self._t: dict[str, int] = {}

    def register(self, name: str, data) -> Value:
        if name in self._params:
            raise KeyError(f"parameter '{name}' already registered")
        p = leaf(data)
        self._params[name] = p
        self._m[name] = np.zeros_like(p.data)
        self._v[name] = np.zeros_like(p.data)
        self._t[name] = 0
        return p

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self) -> list[Value]:
        return list(self._params.values())

    def n_entries(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def adamw_step(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ) -> None:
        """Decoupled-weight-decay Adam update; zeroes gradients afterwards."""
        for name, p in self._params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter '{name}'")
            t = self._t[name] + 1
            self._t[name] = t
            m = self._m[name] = beta1 * self._m[name] + (1.0 - beta1) * g
            v = self._v[name] = beta2 * self._v[name] + (1.0 - beta2) * (g * g)
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
        self.zero_grad()

    # Checkpoint support -----------------------------------------------------

    def export_arrays(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, Array]) -> None:
        for name, arr in arrays.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ShapeError(f"parameter '{name}': checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# Seeded random stream (SplitMix64 counter mode + Box-Muller)
# ---------------------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)


def _mix64(z: Array) -> Array:
    """SplitMix64 finalizer, in place (callers pass freshly built buffers)."""
    z ^= z >> _SH30
    z *= _MIX1
    z ^= z >> _SH27
    z *= _MIX2
    z ^= z >> _SH31
    return z


class RandomStream:
    """Deterministic, platform-independent stream of uniform/normal variates.

    Counter-mode SplitMix64 under the hood; normals via Box-Muller, so the
    stream is identical everywhere for a given seed and call sequence.
    """

    def __init__(self, seed: int):
        self._key = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def _raw(self, n: int) -> Array:
        start = self._counter + 1
        self._counter += n
        idx = np.arange(start, start + n, dtype=np.uint64)
        idx *= _GOLDEN
        idx += self._key
        return _mix64(idx)

    def uniform(self, shape=1) -> Array:
        """Uniforms in [0, 1) with the requested shape (int means flat)."""
        if isinstance(shape, int):
            n, out_shape = shape, (shape,)
        else:
            out_shape = tuple(shape)
            n = int(np.prod(out_shape)) if out_shape else 1
        raw = self._raw(n)
        raw >>= np.uint64(11)
        u = raw.astype(np.float64)
        u *= _INV_2_53
        return u.reshape(out_shape)

    def normal(self, shape=1) -> Array:
        if isinstance(shape, int):
            n, out_shape = shape, (shape,)
        else:
            out_shape = tuple(shape)
            n = int(np.prod(out_shape)) if out_shape else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = u[:pairs]
        np.negative(r, out=r)         # 1-u in (0,1], never log(0)
        np.log1p(r, out=r)
        r *= -2.0
        np.sqrt(r, out=r)
        theta = u[pairs:]
        theta *= 2.0 * math.pi
        z = np.empty(2 * pairs)
        np.cos(theta, out=z[:pairs])
        np.sin(theta, out=z[pairs:])
        z[:pairs] *= r
        z[pairs:] *= r
        return z[:n].reshape(out_shape)

    def randint(self, bound: int, n: int = 1) -> Array:
        """Integers uniform in [0, bound)."""
        if bound <= 0:
            raise DomainError("randint bound must be positive")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> Array:
        arr = np.arange(n)
        if n < 2:
            return arr
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            arr[i], arr[j] = arr[j], arr[i]
        return arr

    def spawn(self, *tokens) -> "RandomStream":
        """Derive an independent child stream from hashable tokens."""
        h = hashlib.blake2b(digest_size=8)
        h.update(int(self._key).to_bytes(8, "little"))
        for t in tokens:
            h.update(repr(t).encode("utf-8"))
            h.update(b"\x1f")
        return RandomStream(int.from_bytes(h.digest(), "little"))


def seeded_rng(seed: int) -> RandomStream:
    return RandomStream(seed)


# ---------------------------------------------------------------------------
# Matrix CSV serialization (one row per line, '.' decimal, no header)
# ---------------------------------------------------------------------------

def save_matrix_csv(arr: Array, path) -> None:
    arr = as_matrix(arr)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in arr:
            f.write(",".join(repr(float(x)) for x in row))
            f.write("\n")


def load_matrix_csv(path) -> Array:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise ShapeError(f"empty matrix file: {path}")
    return as_matrix(rows)


def assert_finite(name: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
