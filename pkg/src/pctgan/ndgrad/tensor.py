"""Dense tensors with a reverse-mode tape that can itself be differentiated.

Every primitive stores a closure computing its vector-Jacobian product using
other primitives.  Running the backward sweep with ``create_graph=True``
therefore records the gradient computation, which is what a gradient penalty
needs: the norm of an input gradient that remains differentiable with respect
to the network parameters.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode differentiation.

    ``data`` keeps whatever floating dtype it was created with; float32 is the
    default for new tensors, float64 is used by the verification suites.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], Sequence[Tensor | None]] | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    @property
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad_output=None, create_graph: bool = False) -> None:
        backward(self, grad_output=grad_output, create_graph=create_graph)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    return out


# -- broadcasting helpers ---------------------------------------------------

def _reduced_axes(shape: tuple, target: tuple) -> tuple[tuple[int, ...], int]:
    lead = len(shape) - len(target)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, t in enumerate(target) if t == 1 and shape[lead + i] != 1
    )
    return axes, lead


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, lead = _reduced_axes(x.shape, shape)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _node(data, (x,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _node(data, (x,), lambda g: (sum_to(g, src),), "broadcast_to")


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# -- elementwise primitives ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def vjp(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, out), b)), b.shape) if b.requires_grad else None
        return ga, gb

    out = _node(a.data / b.data, (a, b), vjp, "div")
    return out


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (neg(g),), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant real exponent."""
    p = float(exponent)
    if p == 2.0:
        return mul(x, x)
    return _node(x.data ** p, (x,),
                 lambda g: (mul(g, mul(power(x, p - 1.0), p)),), "power")


def exp(x: Tensor) -> Tensor:
    out = _node(np.exp(x.data), (x,), lambda g: (mul(g, out),), "exp")
    return out


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (div(g, x),), "log")


def sqrt(x: Tensor) -> Tensor:
    out = _node(np.sqrt(x.data), (x,), lambda g: (div(mul(g, 0.5), out),), "sqrt")
    return out


def tanh(x: Tensor) -> Tensor:
    out = _node(np.tanh(x.data), (x,),
                lambda g: (mul(g, sub(1.0, mul(out, out))),), "tanh")
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    out = _node(s, (x,), lambda g: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _node(x.data * scale, (x,), lambda g: (mul(g, Tensor(scale)),), "leaky_relu")


# -- reductions and shape primitives ------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _node(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (reshape(g, src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (transpose(g, inverse),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    return _node(np.ascontiguousarray(x.data[index]), (x,),
                 lambda g: (scatter_add(g, index, src),), "getitem")


def scatter_add(g: Tensor, index, shape: tuple) -> Tensor:
    """Zeros of ``shape`` with ``g`` accumulated at ``index`` (adjoint of getitem)."""
    data = np.zeros(shape, dtype=g.dtype)
    np.add.at(data, index, g.data)
    return _node(data, (g,), lambda h: (getitem(h, index),), "scatter_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# -- patch extraction (shared by convolution and its transpose) ---------------

def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col_array(x: np.ndarray, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    B, C, H, W = x.shape
    oh, ow = _out_size(H, kh, sh, ph), _out_size(W, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]
    # -> [B, oh, ow, C, kh, kw]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * kh * kw)


def _col2im_array(cols: np.ndarray, shape, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    B, C, H, W = shape
    oh, ow = _out_size(H, kh, sh, ph), _out_size(W, kw, sw, pw)
    c6 = cols.reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += c6[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, ph : ph + H, pw : pw + W])


def im2col(x: Tensor, kernel: tuple, stride: tuple, padding: tuple) -> Tensor:
    """Unfold sliding patches into rows: ``[B*oh*ow, C*kh*kw]``."""
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    src = x.shape
    data = _im2col_array(x.data, kh, kw, sh, sw, ph, pw)
    return _node(data, (x,), lambda g: (col2im(g, src, kernel, stride, padding),), "im2col")


def col2im(cols: Tensor, shape: tuple, kernel: tuple, stride: tuple, padding: tuple) -> Tensor:
    """Fold patch rows back into an image, summing overlaps (adjoint of im2col)."""
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    data = _col2im_array(cols.data, tuple(shape), kh, kw, sh, sw, ph, pw)
    return _node(data, (cols,), lambda g: (im2col(g, kernel, stride, padding),), "col2im")


# -- the backward sweep --------------------------------------------------------

def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen or not root.requires_grad:
            continue
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def _sweep(outputs: Sequence[Tensor], seeds: Sequence[Tensor],
           create_graph: bool) -> tuple[dict[int, Tensor], list[Tensor]]:
    order = _topo_order(outputs)
    grads: dict[int, Tensor] = {}
    for out, seed in zip(outputs, seeds):
        if out.requires_grad:
            grads[id(out)] = grads[id(out)] + seed if id(out) in grads else seed
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = add(grads[key], pg) if key in grads else pg
    # ``order`` keeps every keyed tensor alive, so ids stay unique
    return grads, order


def _seed_for(out: Tensor, grad_output) -> Tensor:
    if grad_output is None:
        return Tensor(np.ones_like(out.data))
    return as_tensor(grad_output, like=out)


def grad(outputs, inputs: Sequence[Tensor], grad_outputs=None,
         create_graph: bool = False) -> list[Tensor | None]:
    """Gradients of ``outputs`` with respect to ``inputs`` without touching ``.grad``.

    Unused inputs get ``None``.  With ``create_graph`` the returned tensors are
    themselves differentiable.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if grad_outputs is None or isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs] * len(outputs)
    seeds = [_seed_for(o, g) for o, g in zip(outputs, grad_outputs)]
    table, _ = _sweep(outputs, seeds, create_graph)
    return [table.get(id(t)) for t in inputs]


def backward(loss: Tensor, grad_output=None, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad_output is None and loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        warnings.warn("loss does not depend on any tensor requiring grad; "
                      "no gradients were produced", RuntimeWarning, stacklevel=2)
        return
    table, order = _sweep([loss], [_seed_for(loss, grad_output)], create_graph)
    for node in order:
        if node.is_leaf and id(node) in table:
            g = table[id(node)]
            if not create_graph:
                g = g.detach()
            node.grad = g if node.grad is None else add(node.grad, g)


def graph_ops(t: Tensor) -> list[str]:
    """Names of the primitives recorded behind ``t`` in topological order."""
    return [n.op for n in _topo_order([t]) if not n.is_leaf]
