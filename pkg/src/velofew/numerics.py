"""Dense tensors with tape-based reverse-mode differentiation.

Small by design: 0/1/2-d float arrays, the handful of primitives the
interaction stages need, and a central-difference gradient checker.
Tensors that participate in a tape are never mutated in place; every
forward pass builds a fresh graph.

64-bit scalars are the default; ``set_default_dtype(np.float32)``
switches new tensors to 32-bit for speed runs.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, DimensionError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

# Test hook: name of an op whose backward rule is deliberately skewed,
# used to prove the gradient checker catches broken backward passes.
FAULT_INJECT_OP = None

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled():
    return _GRAD_ENABLED


class no_grad:
    """Context manager: ops executed inside build no tape."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev, _GRAD_ENABLED = _GRAD_ENABLED, False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


# --------------------------------------------------------------------------
# Exact matrix product.
#
# The contract is bit-for-bit agreement with a sequential triple loop
# (s += a[i,k]*b[k,j] in ascending k).  BLAS reorders and fuses, so numpy's
# dot cannot be used for the forward value.  The numba kernel below compiles
# the literal loop without fast-math, which preserves IEEE semantics; the
# numpy fallback accumulates rank-1 updates in the same k order.

try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _mm_kernel(a, b):
        m, k = a.shape
        _, p = b.shape
        out = np.zeros((m, p), dtype=a.dtype)
        for i in range(m):
            for j in range(p):
                s = out[i, j]
                for l in range(k):
                    s += a[i, l] * b[l, j]
                out[i, j] = s
        return out

    def _mm_exact(a, b):
        return _mm_kernel(a, b)

except ImportError:  # pragma: no cover - exercised only without numba
    def _mm_exact(a, b):
        m, k = a.shape
        _, p = b.shape
        out = np.zeros((m, p), dtype=a.dtype)
        tmp = np.empty((m, p), dtype=a.dtype)
        for l in range(k):
            np.multiply(a[:, l : l + 1], b[l : l + 1, :], out=tmp)
            np.add(out, tmp, out=out)
        return out


class Tensor:
    """A dense array plus an optional position in the current tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor created from non-finite input")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def is_leaf(self):
        return self._backward is None

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        ``self`` must hold a single scalar.  Repeated calls on freshly
        built graphs keep accumulating into leaf buffers; intermediate
        buffers are reset on every call.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        for t in topo:
            if t._backward is not None:
                t.grad = None
        if self._backward is None:
            if self.requires_grad:
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                self.grad = self.grad + np.ones_like(self.data)
            return
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # Operator sugar; the module-level functions carry the contracts.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, grad={self.requires_grad})"


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _node(data, parents):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _skew(op_name, g):
    # Only active while the fault-injection hook is set.
    if FAULT_INJECT_OP == op_name:
        return g * 1.001
    return g


class Param:
    """A named leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name", "value")

    def __init__(self, name, value):
        if isinstance(value, Tensor):
            tensor = value
        else:
            tensor = Tensor(value, requires_grad=True)
        tensor.requires_grad = True
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        self.name = name
        self.value = tensor

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.data.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={tuple(self.shape)})"


def zero_grads(params):
    for p in params:
        p.value.grad = np.zeros_like(p.value.data)


# --------------------------------------------------------------------------
# Primitives


def matmul(a, b):
    """Matrix product with sequential-accumulation forward semantics."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {tuple(a.data.shape)} x {tuple(b.data.shape)}"
        )
    out = _node(_mm_exact(a.data, b.data), (a, b))
    if out.requires_grad:
        def _bw(g):
            g = _skew("matmul", g)
            _accum(a, np.dot(g, b.data.T))
            _accum(b, np.dot(a.data.T, g))

        out._backward = _bw
    return out


def add(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, g)
            _accum(b, g)

        out._backward = _bw
    return out


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, g)
            _accum(b, -g)

        out._backward = _bw
    return out


def neg(a):
    out = _node(-a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, -g)
    return out


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        out._backward = _bw
    return out


def scale(a, s):
    s = float(s)
    out = _node(a.data * s, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * s)
    return out


def mul_array(a, const):
    """Elementwise product with a constant (non-differentiated) array."""
    const = np.asarray(const, dtype=a.data.dtype)
    if const.shape != a.data.shape:
        raise DimensionError(f"mul_array shapes differ: {a.data.shape} vs {const.shape}")
    out = _node(a.data * const, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * const)
    return out


def transpose(a):
    out = _node(a.data.T.copy(), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.T)
    return out


def concat_rows(a, b):
    """Stack b's rows after a's."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(
            f"concat_rows column mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        )
    out = _node(np.concatenate((a.data, b.data), axis=0), (a, b))
    if out.requires_grad:
        na = a.data.shape[0]

        def _bw(g):
            _accum(a, g[:na])
            _accum(b, g[na:])

        out._backward = _bw
    return out


def concat_cols(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"concat_cols row mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        )
    out = _node(np.concatenate((a.data, b.data), axis=1), (a, b))
    if out.requires_grad:
        na = a.data.shape[1]

        def _bw(g):
            _accum(a, g[:, :na])
            _accum(b, g[:, na:])

        out._backward = _bw
    return out


def slice_rows(a, start, stop):
    out = _node(a.data[start:stop].copy(), (a,))
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accum(a, full)

        out._backward = _bw
    return out


def pick(a, i, j):
    """Extract a single entry of a 2-d tensor as a 0-d scalar."""
    out = _node(np.asarray(a.data[i, j]), (a,))
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            full[i, j] = g
            _accum(a, full)

        out._backward = _bw
    return out


def stack_row(scalars):
    """Assemble 0-d scalar tensors into a 1 x N row."""
    parents = tuple(scalars)
    data = np.array([[float(s.data) for s in parents]], dtype=_DEFAULT_DTYPE)
    out = _node(data, parents)
    if out.requires_grad:
        def _bw(g):
            for idx, s in enumerate(parents):
                _accum(s, np.asarray(g[0, idx]))

        out._backward = _bw
    return out


def softmax_rows(x):
    """Row-wise softmax with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _node(y, (x,))
    if out.requires_grad:
        def _bw(g):
            g = _skew("softmax_rows", g)
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, (g - dot) * y)

        out._backward = _bw
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row standardization followed by an affine transform."""
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match row width {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _bw(g):
            _accum(gain, (g * xhat).sum(axis=0) if g.ndim == 2 else g * xhat)
            _accum(bias, g.sum(axis=0) if g.ndim == 2 else g)
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gx - m1 - xhat * m2) * inv)

        out._backward = _bw
    return out


def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    u = _SQRT_2_OVER_PI * (x.data + _GELU_CUBIC * x.data**3)
    t = np.tanh(u)
    out = _node(0.5 * x.data * (1.0 + t), (x,))
    if out.requires_grad:
        def _bw(g):
            g = _skew("gelu", g)
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x.data**2)
            grad = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            _accum(x, g * grad)

        out._backward = _bw
    return out


def gelu_exact_reference(x):
    """Erf-based reference value (test oracle, forward only)."""
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = np.array([v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in flat])
    return out.reshape(np.asarray(x).shape)


def relu(x):
    out = _node(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:
        mask = x.data > 0

        def _bw(g):
            _accum(x, g * mask)

        out._backward = _bw
    return out


def mean_rows(x):
    """Mean over rows of a T x C tensor, returned as 1 x C."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows expects a matrix, got shape {x.data.shape}")
    n = x.data.shape[0]
    out = _node(x.data.mean(axis=0, keepdims=True), (x,))
    if out.requires_grad:
        def _bw(g):
            _accum(x, np.repeat(g / n, n, axis=0))

        out._backward = _bw
    return out


def add_rowvec(x, r):
    """Broadcast-add a 1 x C row onto every row of x."""
    if r.data.shape != (1, x.data.shape[1]):
        raise DimensionError(
            f"add_rowvec needs 1x{x.data.shape[1]} row, got {r.data.shape}"
        )
    out = _node(x.data + r.data, (x, r))
    if out.requires_grad:
        def _bw(g):
            _accum(x, g)
            _accum(r, g.sum(axis=0, keepdims=True))

        out._backward = _bw
    return out


def sum_all(x):
    out = _node(np.asarray(x.data.sum()), (x,))
    if out.requires_grad:
        out._backward = lambda g: _accum(x, np.broadcast_to(g, x.data.shape).copy())
    return out


def log_clamped(x, floor=1e-12):
    """log(max(x, floor)); gradient is zero on the clamped region."""
    clamped = np.maximum(x.data, floor)
    out = _node(np.log(clamped), (x,))
    if out.requires_grad:
        live = x.data > floor

        def _bw(g):
            _accum(x, g * live / clamped)

        out._backward = _bw
    return out


# --------------------------------------------------------------------------
# Gradient checking


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradReport:
    """Central-difference check result, one entry per parameter."""

    entries: list = field(default_factory=list)
    h: float = 1e-5
    tol: float = 1e-5

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def worst(self):
        return max(self.entries, key=lambda e: e.max_rel_error)


def grad_check(forward, params, h=1e-5, tol=1e-5):
    """Compare analytic gradients of ``forward()`` against central differences.

    ``forward`` must be deterministic in the params and return a scalar
    Tensor.  Per-scalar relative error is |a-n| / max(1e-12, |a|+|n|);
    the report keeps the per-parameter maximum.
    """
    params = list(params)
    zero_grads(params)
    loss = forward()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    report = GradReport(h=h, tol=tol)
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(forward().data)
                flat[i] = orig - h
                f_minus = float(forward().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                err = abs(aflat[i] - numeric) / max(1e-12, abs(aflat[i]) + abs(numeric))
                if err > worst:
                    worst = err
            report.entries.append(ParamCheck(p.name, worst, worst < tol))
    return report
