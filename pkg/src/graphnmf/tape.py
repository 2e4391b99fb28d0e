"""Minimal reverse-mode differentiation over float64 numpy arrays.

Tensors hold arrays of rank <= 2 (rank 0 for scalar reductions). Primitive
calls made inside ``with Tape() as tape:`` are recorded whenever one of their
inputs requires a gradient; :func:`backward` then walks the record once.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(multiply(x, x))
    >>> backward(tape, loss)[x]
    array([2., 4.])

Only row-vector bias broadcasting is supported (in :func:`add`,
:func:`subtract` and :func:`linear`); every other shape mismatch raises.
"""
from __future__ import annotations

import contextvars

import numpy as np
from scipy.linalg import cho_factor, cho_solve

LN_EPS = 1e-5


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


_active_tape = contextvars.ContextVar("graphnmf_active_tape", default=None)


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_chol")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.array(value, dtype=np.float64)
        if value.ndim > 2:
            raise ShapeError(f"tensors have rank <= 2, got shape {value.shape}")
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self._chol = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.value.copy()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return subtract(self, _wrap(other))

    def __rsub__(self, other):
        return subtract(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)


def _emit(value, parents, backward_fn, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    tape = _active_tape.get()
    record = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=record)
    if record:
        if tape.consumed:
            raise TapeError("tape already consumed by backward()")
        tape.nodes.append((out, parents, backward_fn))
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_row_bias(a, b):
    return a.value.ndim == 2 and b.value.ndim == 2 and b.shape == (1, a.shape[1]) and a.shape[0] != 1


# -- primitives -------------------------------------------------------------

def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.value, b.value
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def transpose(a):
    if a.value.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a, b):
    if _is_row_bias(a, b):
        return _emit(a.value + b.value, (a, b), lambda g: (g, g.sum(0, keepdims=True)), "add")
    _check_same(a, b, "add")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g), "add")


def subtract(a, b):
    if _is_row_bias(a, b):
        return _emit(a.value - b.value, (a, b), lambda g: (g, -g.sum(0, keepdims=True)), "subtract")
    _check_same(a, b, "subtract")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g), "subtract")


def scale(a, c):
    c = float(c)
    return _emit(c * a.value, (a,), lambda g: (c * g,), "scale")


def multiply(a, b):
    _check_same(a, b, "multiply")
    A, B = a.value, b.value
    return _emit(A * B, (a, b), lambda g: (g * B, g * A), "multiply")


def concat_columns(tensors):
    tensors = tuple(tensors)
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.value.ndim != 2 for t in tensors):
        raise ShapeError(f"concat_columns: incompatible shapes {[t.shape for t in tensors]}")
    widths = np.cumsum([0] + [t.shape[1] for t in tensors])

    def back(g):
        return tuple(g[:, widths[k]:widths[k + 1]] for k in range(len(tensors)))

    return _emit(np.concatenate([t.value for t in tensors], axis=1), tensors, back, "concat_columns")


def slice_columns(a, start, stop):
    if a.value.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice_columns: bad range [{start}, {stop}) for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.value[:, start:stop].copy(), (a,), back, "slice_columns")


def relu(a):
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def softmax_over_sources(a):
    """Softmax down each column (axis 0 indexes the source nodes)."""
    if a.value.ndim != 2:
        raise ShapeError(f"softmax_over_sources needs a 2-D tensor, got {a.shape}")
    z = np.exp(a.value - a.value.max(axis=0, keepdims=True))
    y = z / z.sum(axis=0, keepdims=True)
    return _emit(y, (a,), lambda g: (y * (g - (g * y).sum(axis=0, keepdims=True)),), "softmax")


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize each row over its features, then apply ``gain`` and ``bias`` (1 x d)."""
    X = x.value
    if X.ndim != 2 or gain.shape != (1, X.shape[1]) or bias.shape != (1, X.shape[1]):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = X.mean(axis=1, keepdims=True)
    sigma = np.sqrt(((X - mu) ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = (X - mu) / sigma
    G = gain.value

    def back(g):
        dxhat = g * G
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / sigma
        return dx, (g * xhat).sum(0, keepdims=True), g.sum(0, keepdims=True)

    return _emit(xhat * G + bias.value, (x, gain, bias), back, "layer_norm")


def linear(x, weight, bias):
    """``x @ weight + bias`` with ``bias`` a 1 x k row vector."""
    if x.value.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (1, weight.shape[1]):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    X, Wt = x.value, weight.value

    def back(g):
        return g @ Wt.T, X.T @ g, g.sum(0, keepdims=True)

    return _emit(X @ Wt + bias.value, (x, weight, bias), back, "linear")


def spd_solve(A, B):
    """``A^{-1} B`` for symmetric positive-definite ``A``.

    The Cholesky factor is cached on ``A`` so repeated solves against the
    same tensor factorize once.
    """
    Av = A.value
    if Av.ndim != 2 or Av.shape[0] != Av.shape[1] or B.value.ndim != 2 or B.shape[0] != Av.shape[0]:
        raise ShapeError(f"spd_solve: A {A.shape}, B {B.shape}")
    if A._chol is None or not np.array_equal(A._chol[0], Av):
        if np.abs(Av - Av.T).max() > 1e-10 * max(1.0, np.abs(Av).max()):
            raise ValueError("spd_solve: A is not symmetric")
        try:
            A._chol = (Av.copy(), cho_factor(Av, lower=True))
        except np.linalg.LinAlgError as err:
            raise ValueError("spd_solve: A is not positive definite") from err
    chol = A._chol[1]
    X = cho_solve(chol, B.value)

    def back(g):
        dB = cho_solve(chol, g)
        return -dB @ X.T, dB

    return _emit(X, (A, B), back, "spd_solve")


def tsum(a, axis=None):
    """Sum of all entries (rank-0 result) or along ``axis`` (kept as 2-D)."""
    shape = a.shape
    if axis is None:
        return _emit(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")
    out = a.value.sum(axis=axis, keepdims=True)
    return _emit(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    size = a.value.size
    shape = a.shape
    return _emit(np.array(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / size),), "mean")


def reshape(a, shape):
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from err
    if out.ndim > 2:
        raise ShapeError("reshape: result rank > 2")
    return _emit(out.copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def repeat_rows(a, k):
    """Each row repeated ``k`` times in place: row ``i*k + j`` is ``a[i]``."""
    m, d = a.shape
    return _emit(np.repeat(a.value, k, axis=0), (a,),
                 lambda g: (g.reshape(m, k, d).sum(axis=1),), "repeat_rows")


def tile_rows(a, k):
    """The whole block stacked ``k`` times: row ``i*n + j`` is ``a[j]``."""
    n, d = a.shape
    return _emit(np.tile(a.value, (k, 1)), (a,),
                 lambda g: (g.reshape(k, n, d).sum(axis=0),), "tile_rows")


def stop_gradient(a):
    return Tensor(a.value)


# -- differentiation --------------------------------------------------------

def backward(tape: Tape, loss: Tensor):
    """Gradients of the scalar ``loss`` with respect to every leaf it depends on.

    Returns a dict keyed by leaf tensor. A tape can be consumed only once.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True
    if not loss.requires_grad:
        return {}
    produced = {id(out) for out, _, _ in tape.nodes}
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, fn(g)):
            if not p.requires_grad or gp is None:
                continue
            key = id(p)
            if key not in produced:
                leaves[key] = p
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = np.array(gp, dtype=np.float64).reshape(p.shape)
    result = {}
    for key, leaf in leaves.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {leaf!r}")
        result[leaf] = g
    return result


def finite_diff_check(f, theta, step=1e-6):
    """Max elementwise ``|g_ad - g_fd| / (|g_fd| + 1e-8)`` of ``f`` at ``theta``.

    ``f`` maps ``theta`` (a Tensor, or a list of Tensors passed through
    unchanged) to a scalar Tensor. Central differences perturb each entry by
    ``step``; values are restored afterwards.
    """
    params = list(theta) if isinstance(theta, (list, tuple)) else [theta]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with Tape() as tape:
            out = f(theta)
        grads = backward(tape, out)
        worst = 0.0
        for p in params:
            g_ad = grads.get(p, np.zeros(p.shape))
            flat = p.value.reshape(-1)
            g_fd = np.empty(flat.size)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = float(f(theta).value)
                flat[k] = orig - step
                fm = float(f(theta).value)
                flat[k] = orig
                g_fd[k] = (fp - fm) / (2 * step)
            err = np.abs(g_ad.reshape(-1) - g_fd) / (np.abs(g_fd) + 1e-8)
            if err.size:
                worst = max(worst, float(err.max()))
        return worst
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s
