"""Dense float64 tensors with hand-written reverse-mode gradients.

Every operation here exists in two modes sharing the same arithmetic:

* called on :class:`Tensor` inputs it records the op on the computation
  graph and attaches a hand-written backward closure;
* called on plain ``numpy.ndarray`` inputs it is just numpy (no graph,
  no wrappers) — this is the fast path used by finite-difference sweeps.

Gradients are accumulated in a fixed topological order derived from the
graph structure, so repeated backward passes over the same graph produce
bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

LOG_CLAMP = 1e-12


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapOutOfRange(ValueError):
    """Requested hidden-state tap layer does not exist."""


class NonDeterministicLoss(RuntimeError):
    """Two evaluations of the loss at identical parameters differed."""


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaves that want gradients; it propagates to
    results of ops that consume them. ``backward()`` walks the recorded
    graph from this node in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- introspection ------------------------------------------------------

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _acc(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable grad buffer."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit gradient")
            grad = np.ones_like(self.data)
        # Iterative post-order DFS; reversed, it is a topological order in
        # which every consumer runs before its inputs.
        topo: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, Iterable[Tensor]]] = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            for p in parents:
                if id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    break
            else:
                topo.append(node)
                stack.pop()
        self._acc(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_graph(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _attach(out: Tensor, parents: tuple[Tensor, ...], backward: Callable[[Array], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a, b):
    if not _is_graph(a, b):
        return np.add(a, b)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.data.shape))

    return _attach(out, (a, b), backward)


def sub(a, b):
    if not _is_graph(a, b):
        return np.subtract(a, b)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-g, b.data.shape))

    return _attach(out, (a, b), backward)


def mul(a, b):
    if not _is_graph(a, b):
        return np.multiply(a, b)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.data, b.data.shape))

    return _attach(out, (a, b), backward)


def div(a, b):
    if not _is_graph(a, b):
        return np.divide(a, b)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _attach(out, (a, b), backward)


def power(a, p: float):
    if not _is_graph(a):
        return np.power(a, p)
    a = as_tensor(a)
    out = Tensor(np.power(a.data, p))

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._acc(g * p * np.power(a.data, p - 1))

    return _attach(out, (a,), backward)


def matmul(a, b):
    """Matrix product; 2-D operands or stacked 3-D with equal batch dims.

    Backward: a.grad += g @ b^T, b.grad += a^T @ g (batch-wise for 3-D).
    """
    if not _is_graph(a, b):
        return a @ b
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: batch dims differ ({a.shape} @ {b.shape})")
    out = Tensor(a.data @ b.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._acc(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._acc(np.swapaxes(a.data, -1, -2) @ g)

    return _attach(out, (a, b), backward)


def relu(x):
    if not _is_graph(x):
        return np.maximum(x, 0.0)
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g: Array) -> None:
        if x.requires_grad:
            # subgradient 0 at the kink
            x._acc(g * (x.data > 0.0))

    return _attach(out, (x,), backward)


def _sigmoid_raw(x: Array) -> Array:
    # exp(-|x|) never overflows; both branches share it
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    if not _is_graph(x):
        return _sigmoid_raw(np.asarray(x, dtype=np.float64))
    x = as_tensor(x)
    s = _sigmoid_raw(x.data)
    out = Tensor(s)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._acc(g * s * (1.0 - s))

    return _attach(out, (x,), backward)


def clamped_log(x, floor: float = LOG_CLAMP):
    """log(max(x, floor)); zero gradient inside the clamped region."""
    if not _is_graph(x):
        return np.log(np.maximum(x, floor))
    x = as_tensor(x)
    clipped = np.maximum(x.data, floor)
    out = Tensor(np.log(clipped))

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._acc(np.where(x.data > floor, g / clipped, 0.0))

    return _attach(out, (x,), backward)


def _softmax_raw(x: Array, axis: int) -> Array:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis: int = -1):
    """Max-subtracted softmax along `axis`; slices sum to 1."""
    if not _is_graph(x):
        return _softmax_raw(np.asarray(x, dtype=np.float64), axis)
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"softmax: axis {axis} invalid for shape {x.shape}")
    s = _softmax_raw(x.data, axis)
    out = Tensor(s)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._acc(s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _attach(out, (x,), backward)


def _log_softmax_raw(x: Array, axis: int) -> Array:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1):
    if not _is_graph(x):
        return _log_softmax_raw(np.asarray(x, dtype=np.float64), axis)
    x = as_tensor(x)
    ls = _log_softmax_raw(x.data, axis)
    out = Tensor(ls)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._acc(g - np.exp(ls) * np.sum(g, axis=axis, keepdims=True))

    return _attach(out, (x,), backward)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape: tuple[int, ...]):
    if not _is_graph(x):
        return np.reshape(x, shape)
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._acc(g.reshape(x.data.shape))

    return _attach(out, (x,), backward)


def transpose(x, axes: tuple[int, ...]):
    if not _is_graph(x):
        return np.transpose(x, axes)
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._acc(np.transpose(g, inverse))

    return _attach(out, (x,), backward)


def concat(parts: Sequence, axis: int = 0):
    if not _is_graph(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                p._acc(g[tuple(index)])

    return _attach(out, tuple(parts), backward)


def narrow(x, key: tuple):
    """Basic slicing with gradient scatter back into the source."""
    if not _is_graph(x):
        return x[key]
    x = as_tensor(x)
    out = Tensor(x.data[key])

    def backward(g: Array) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[key] = g
            x._acc(full)

    return _attach(out, (x,), backward)


def rows(x, start: int, stop: int):
    return narrow(x, (slice(start, stop),))


def take_rows(table, ids: Sequence[int]):
    """Row gather (embedding lookup); backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    if not _is_graph(table):
        return table[idx]
    table = as_tensor(table)
    out = Tensor(table.data[idx])

    def backward(g: Array) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._acc(full)

    return _attach(out, (table,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False):
    if not _is_graph(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def backward(g: Array) -> None:
        if x.requires_grad:
            if axis is None:
                x._acc(np.broadcast_to(g, x.data.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                x._acc(np.broadcast_to(g, x.data.shape).copy())

    return _attach(out, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False):
    # sum * (1/n) in both modes so graph and plain evaluations agree bitwise
    if not _is_graph(x):
        n = np.size(x) if axis is None else np.shape(x)[axis]
        return np.sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Fused layers
# ---------------------------------------------------------------------------


def _layer_norm_stats(x: Array, eps: float) -> tuple[Array, Array]:
    mu = np.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if not _is_graph(x, gain, bias):
        xhat, _ = _layer_norm_stats(np.asarray(x, dtype=np.float64), eps)
        return gain * xhat + bias
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xhat, inv_std = _layer_norm_stats(x.data, eps)
    out = Tensor(gain.data * xhat + bias.data)

    def backward(g: Array) -> None:
        if gain.requires_grad:
            gain._acc(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._acc(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gh = g * gain.data
            m1 = np.mean(gh, axis=-1, keepdims=True)
            m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
            x._acc(inv_std * (gh - m1 - xhat * m2))

    return _attach(out, (x, gain, bias), backward)


def _tconv_shape(h: int, w: int, k: int, stride: int) -> tuple[int, int]:
    return (h - 1) * stride + k, (w - 1) * stride + k


def _tconv_fwd(x: Array, kern: Array, stride: int) -> Array:
    c_in, h, w = x.shape
    _, c_out, k, _ = kern.shape
    oh, ow = _tconv_shape(h, w, k, stride)
    out = np.zeros((c_out, oh, ow))
    for ki in range(k):
        for kj in range(k):
            # out[o, i*stride+ki, j*stride+kj] += sum_c x[c,i,j] * kern[c,o,ki,kj]
            contrib = np.einsum("chw,co->ohw", x, kern[:, :, ki, kj])
            out[:, ki : ki + stride * h : stride, kj : kj + stride * w : stride] += contrib
    return out


def transposed_conv2d(x, kern, stride: int = 1):
    """Fractionally-strided convolution: zero-insertion upsample + correlate.

    x: (C_in, h, w); kern: (C_in, C_out, k, k); output (C_out, (h-1)*stride+k, ...).
    """
    xin = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    kin = kern.data if isinstance(kern, Tensor) else np.asarray(kern, dtype=np.float64)
    if xin.ndim != 3 or kin.ndim != 4 or kin.shape[2] != kin.shape[3]:
        raise ShapeMismatch(f"transposed_conv2d: x {xin.shape}, kernel {kin.shape}")
    if xin.shape[0] != kin.shape[0]:
        raise ShapeMismatch(
            f"transposed_conv2d: input channels {xin.shape[0]} != kernel {kin.shape[0]}"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not _is_graph(x, kern):
        return _tconv_fwd(xin, kin, stride)
    x, kern = as_tensor(x), as_tensor(kern)
    out = Tensor(_tconv_fwd(xin, kin, stride))
    c_in, h, w = xin.shape
    k = kin.shape[2]

    def backward(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for ki in range(k):
                for kj in range(k):
                    view = g[:, ki : ki + stride * h : stride, kj : kj + stride * w : stride]
                    gx += np.einsum("ohw,co->chw", view, kern.data[:, :, ki, kj])
            x._acc(gx)
        if kern.requires_grad:
            gk = np.zeros_like(kern.data)
            for ki in range(k):
                for kj in range(k):
                    view = g[:, ki : ki + stride * h : stride, kj : kj + stride * w : stride]
                    gk[:, :, ki, kj] = np.einsum("chw,ohw->co", x.data, view)
            kern._acc(gk)

    return _attach(out, (x, kern), backward)


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------


class FrozenParameterError(ValueError):
    """An update touched a frozen parameter."""


@dataclass
class ParamSet:
    """Named trainable tensors plus a set of names excluded from updates."""

    tensors: dict[str, Tensor]
    frozen: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        unknown = self.frozen - self.tensors.keys()
        if unknown:
            raise FrozenParameterError(f"frozen names not in set: {sorted(unknown)}")
        # frozen tensors never need their own gradients; gradients still flow
        # through the ops that consume them
        for name, t in self.tensors.items():
            t.requires_grad = name not in self.frozen

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, Array]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def sgd_step(self, lr_for: Callable[[str], float]) -> None:
        """In-place gradient descent on non-frozen entries; frozen stay bit-identical."""
        for name, t in self.trainable():
            if t.grad is not None:
                t.data -= lr_for(name) * t.grad


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

ABS_REGIME = 1e-6  # |analytic| below this -> compare absolutely


def _fd_error(analytic: float, numeric: float) -> float:
    if abs(analytic) < ABS_REGIME:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))


@dataclass
class GradCheckEntry:
    name: str
    count: int
    max_error: float
    worst_index: int
    worst_analytic: float
    worst_numeric: float


@dataclass
class GradCheckReport:
    step: float
    tol: float
    loss_value: float
    entries: list[GradCheckEntry]

    @property
    def max_error(self) -> float:
        return max((e.max_error for e in self.entries), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error < self.tol

    def format_table(self) -> str:
        lines = [f"{'parameter':<28} {'#':>7} {'max err':>12}  worst (analytic vs numeric)"]
        for e in self.entries:
            lines.append(
                f"{e.name:<28} {e.count:>7} {e.max_error:>12.3e}  "
                f"[{e.worst_index}] {e.worst_analytic:+.6e} vs {e.worst_numeric:+.6e}"
            )
        verdict = "PASS" if self.ok else "FAIL"
        lines.append(f"overall max error {self.max_error:.3e} (tol {self.tol:.1e}) -> {verdict}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    step: float = 1e-5,
    tol: float = 1e-5,
    value_fn: Callable[[ParamSet], float] | None = None,
    bulk_fd: Callable[[str, float], Array | None] | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    For every scalar entry of every non-frozen tensor the analytic gradient
    (one backward pass of `loss_fn`) is compared with
    (loss(t+step) - loss(t-step)) / (2*step). Relative error is reported,
    falling back to absolute error where |analytic| < 1e-6.

    `value_fn`, when given, is a cheap plain-float evaluator used for the
    difference sweeps; it must agree with `loss_fn` at the base point.
    `bulk_fd(name, step)`, when given, may return the full array of central
    differences for one tensor in a single vectorized pass (or None to fall
    back to the scalar sweep). `names` restricts the sweep to a subset of
    tensors.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    evaluate = value_fn if value_fn is not None else (lambda p: float(loss_fn(p).item()))

    base1 = evaluate(params)
    base2 = evaluate(params)
    if base1 != base2:
        raise NonDeterministicLoss(f"loss not reproducible: {base1!r} vs {base2!r}")

    params.zero_grad()
    out = loss_fn(params)
    if not isinstance(out, Tensor) or out.size != 1:
        raise TypeError("loss_fn must return a scalar Tensor")
    if value_fn is not None:
        drift = abs(out.item() - base1) / max(abs(base1), 1.0)
        if drift > 1e-9:
            raise NonDeterministicLoss(
                f"value_fn disagrees with loss_fn at base point: {base1!r} vs {out.item()!r}"
            )
    out.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.trainable()
    }

    swept = params.trainable()
    if names is not None:
        wanted = set(names)
        swept = [(n, t) for n, t in swept if n in wanted]

    entries: list[GradCheckEntry] = []
    for name, t in swept:
        flat = t.data.ravel()
        ana = analytic[name].ravel()
        numeric_all: Array | None = None
        if bulk_fd is not None:
            numeric_all = bulk_fd(name, step)
            if numeric_all is not None:
                numeric_all = np.asarray(numeric_all, dtype=np.float64).ravel()
                if numeric_all.size != flat.size:
                    raise ShapeMismatch(f"bulk_fd for {name}: {numeric_all.size} != {flat.size}")
        worst = (-1.0, 0, 0.0, 0.0)
        for i in range(flat.size):
            if numeric_all is not None:
                numeric = float(numeric_all[i])
            else:
                saved = flat[i]
                flat[i] = saved + step
                lp = evaluate(params)
                flat[i] = saved - step
                lm = evaluate(params)
                flat[i] = saved
                numeric = (lp - lm) / (2.0 * step)
            err = _fd_error(float(ana[i]), numeric)
            if err > worst[0]:
                worst = (err, i, float(ana[i]), numeric)
        entries.append(GradCheckEntry(name, flat.size, max(worst[0], 0.0), *worst[1:]))
    return GradCheckReport(step=step, tol=tol, loss_value=base1, entries=entries)


# ---------------------------------------------------------------------------
# Deterministic fixed position table (shared by vision/llm)
# ---------------------------------------------------------------------------


def sinusoid_table(length: int, dim: int) -> Array:
    """Fixed sin/cos position table; not a trainable parameter."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def new_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
