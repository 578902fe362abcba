"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation links its output to its inputs through a gradient closure.
Creation order doubles as topological order, so `backward` can replay the
recorded graph strictly in reverse and touch each node exactly once.
Broadcasting is restricted to leading-dimension expansion (the smaller
operand must match the trailing dims of the larger) so shape bugs stay loud.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, OracleError

_seq = itertools.count()
_grad_enabled = True
_finite_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion run after every forward operation."""
    global _finite_checks
    _finite_checks = bool(enabled)


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _const(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._grad_fn = None
    t._seq = next(_seq)
    if _finite_checks and not np.isfinite(data).all():
        raise NumericalError("non-finite value produced by a forward operation")
    return t


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = True
    t.grad = None
    t._parents = parents
    t._grad_fn = grad_fn
    t._seq = next(_seq)
    if _finite_checks and not np.isfinite(data).all():
        raise NumericalError("non-finite value produced by a forward operation")
    return t


def _tracked(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _broadcast_check(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    """Allow identical shapes or a trailing-suffix match (leading expansion)."""
    if sa == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise DimensionError(f"shapes {sa} and {sb} are not leading-broadcast compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that broadcasting introduced."""
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = a.data + b.data
    if not _tracked(a, b):
        return _const(out)
    na, nb = a.requires_grad, b.requires_grad
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return (_reduce_to(g, sa) if na else None,
                _reduce_to(g, sb) if nb else None)

    return _node(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = a.data - b.data
    if not _tracked(a, b):
        return _const(out)
    na, nb = a.requires_grad, b.requires_grad
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return (_reduce_to(g, sa) if na else None,
                _reduce_to(-g, sb) if nb else None)

    return _node(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = a.data * b.data
    if not _tracked(a, b):
        return _const(out)
    na, nb = a.requires_grad, b.requires_grad
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_reduce_to(g * bd, sa) if na else None,
                _reduce_to(g * ad, sb) if nb else None)

    return _node(out, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    if not _tracked(a):
        return _const(out)
    return _node(out, (a,), lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth gate used inside expert feedforwards."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    if not _tracked(x):
        return _const(out)
    xd = x.data

    def grad_fn(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _node(out, (x,), grad_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements; returns a scalar."""
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.mean(diff * diff))
    if not _tracked(a, b):
        return _const(out)
    na, nb = a.requires_grad, b.requires_grad
    n = diff.size

    def grad_fn(g):
        base = (2.0 / n) * g * diff
        return (base if na else None, -base if nb else None)

    return _node(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if not _tracked(a, b):
        return _const(out)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _node(out, (a, b), grad_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product; leading dims must match exactly."""
    if a.ndim < 3 or b.ndim != a.ndim:
        raise DimensionError(f"bmm expects stacked operands of equal rank, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm shapes disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if not _tracked(a, b):
        return _const(out)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.swapaxes(-1, -2) if na else None
        gb = ad.swapaxes(-1, -2) @ g if nb else None
        return (ga, gb)

    return _node(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# normalizers


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`; rows sum to one."""
    if z.shape == () or z.shape[axis] < 1:
        raise DimensionError(f"softmax axis {axis} is empty for shape {z.shape}")
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(z):
        return _const(out)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _node(out, (z,), grad_fn)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each trailing-axis row to unit root-mean-square, then apply gain."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm gain shape {gain.shape} does not match feature dim {d}")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.data * inv
    out = normed * gain.data
    if not _tracked(x, gain):
        return _const(out)
    nx, ng = x.requires_grad, gain.requires_grad
    xd, gd = x.data, gain.data

    def grad_fn(g):
        gx = None
        if nx:
            gg = g * gd
            # d/dx of x*inv: inv * (g - x * <g, x> / (d * (ms + eps)))
            proj = (gg * xd).sum(axis=-1, keepdims=True) / (d * (ms + eps))
            gx = inv * (gg - xd * proj)
        ggain = (g * normed).sum(axis=tuple(range(g.ndim - 1))) if ng else None
        return (gx, ggain)

    return _node(out, (x, gain), grad_fn)


# ---------------------------------------------------------------------------
# reductions and layout


def _reduce(x: Tensor, axis: int | None, mean: bool) -> Tensor:
    if axis is None:
        count = x.size
        out = np.asarray(x.data.mean() if mean else x.data.sum())
    else:
        count = x.shape[axis]
        out = x.data.mean(axis=axis) if mean else x.data.sum(axis=axis)
    if not _tracked(x):
        return _const(out)
    shape = x.shape
    denom = count if mean else 1

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / denom, shape).copy(),)
        gg = np.expand_dims(g, axis) / denom
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(out, (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    if not _tracked(x):
        return _const(out)
    orig = x.shape

    def grad_fn(g):
        return (g.reshape(orig),)

    return _node(out, (x,), grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    if not _tracked(x):
        return _const(out)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _node(out, (x,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not _tracked(*parts):
        return _const(out)
    sizes = [p.shape[axis] for p in parts]
    needs = [p.requires_grad for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _node(out, tuple(parts), grad_fn)


# ---------------------------------------------------------------------------
# token dispatch


def _check_index(idx: np.ndarray, limit: int, what: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise IndexError(f"{what} index out of range [0, {limit})")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of x (axis 0) by integer index; duplicates allowed."""
    idx = _check_index(np.asarray(idx, dtype=np.int64), x.shape[0], "gather_rows")
    if idx.ndim != 1:
        raise DimensionError("gather_rows expects a 1-d index array")
    out = x.data[idx]
    if not _tracked(x):
        return _const(out)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), grad_fn)


def scatter_add_rows(values: Tensor, idx, num_rows: int) -> Tensor:
    """Accumulate value rows into a zero matrix; duplicate indices sum."""
    idx = _check_index(np.asarray(idx, dtype=np.int64), num_rows, "scatter_add_rows")
    if idx.ndim != 1 or idx.shape[0] != values.shape[0]:
        raise DimensionError(f"scatter_add_rows index shape {idx.shape} does not match values {values.shape}")
    out = np.zeros((num_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values.data)
    if not _tracked(values):
        return _const(out)

    def grad_fn(g):
        return (g[idx],)

    return _node(out, (values,), grad_fn)


def take_per_row(x: Tensor, idx) -> Tensor:
    """Gather idx[t, j] -> x[t, idx[t, j]] for a [T, K] matrix; output [T, k]."""
    if x.ndim != 2:
        raise DimensionError(f"take_per_row expects a 2-d tensor, got {x.shape}")
    idx = _check_index(np.asarray(idx, dtype=np.int64), x.shape[1], "take_per_row")
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_per_row index shape {idx.shape} does not match {x.shape}")
    out = np.take_along_axis(x.data, idx, axis=1)
    if not _tracked(x):
        return _const(out)
    shape = x.shape
    rows = np.arange(shape[0])[:, None]

    def grad_fn(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _node(out, (x,), grad_fn)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by scalar s[i]."""
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise DimensionError(f"scale_rows weights {s.shape} do not match rows of {x.shape}")
    col = s.data.reshape((-1,) + (1,) * (x.ndim - 1))
    out = x.data * col
    if not _tracked(x, s):
        return _const(out)
    nx, ns = x.requires_grad, s.requires_grad
    xd = x.data
    sum_axes = tuple(range(1, x.ndim))

    def grad_fn(g):
        gx = g * col if nx else None
        gs = (g * xd).sum(axis=sum_axes) if ns else None
        return (gx, gs)

    return _node(out, (x, s), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Execution-ordered view of the graph reachable from a root tensor."""

    def __init__(self, root: Tensor):
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad leaf with d(loss)/d(leaf).

    Repeated calls without zeroing accumulate, matching the usual convention.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            # out-of-place accumulate: grad_fns may hand back shared arrays
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst: str = ""


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare tape gradients of f at x against central finite differences."""
    if step <= 0:
        raise ContractError("finite_diff_check requires step > 0")
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    backward(loss)
    tape_grad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = probe.data.copy()
    flat = base.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(base)).item()
            flat[i] = orig - step
            lo = f(Tensor(base)).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OracleError(f"non-finite value while probing element {i}")
            fd[i] = (hi - lo) / (2.0 * step)
    fd = fd.reshape(base.shape)

    errs = np.abs(tape_grad - fd) / np.maximum(np.maximum(np.abs(tape_grad), np.abs(fd)), 1.0)
    worst = int(np.argmax(errs))
    max_err = float(errs.reshape(-1)[worst])
    return FiniteDiffReport(max_err, tol, max_err <= tol, worst=f"element {worst}")


def finite_diff_check_params(f: Callable[[], Tensor], params: dict[str, Tensor],
                             step: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Finite-difference check of a closure's gradient w.r.t. named parameters.

    `f` must be deterministic: it is re-evaluated twice per parameter element
    with the parameter nudged in place.
    """
    if step <= 0:
        raise ContractError("finite_diff_check_params requires step > 0")
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)

    worst_err, worst_name = 0.0, ""
    with no_grad():
        for name, p in params.items():
            tape_grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = tape_grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = f().item()
                flat[i] = orig - step
                lo = f().item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise OracleError(f"non-finite value while probing {name}[{i}]")
                err = _rel_error(gflat[i], (hi - lo) / (2.0 * step))
                if err > worst_err:
                    worst_err, worst_name = err, f"{name}[{i}]"
    return FiniteDiffReport(worst_err, tol, worst_err <= tol, worst=worst_name)
