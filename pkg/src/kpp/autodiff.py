"""Define-by-run reverse-mode differentiation over dense float64 tensors.

A Tensor wraps a NumPy array plus an optional gradient and the backward rule
that produced it.  Graphs are built implicitly by calling the op functions
below; ``backward(loss)`` walks the graph once in reverse topological order.
Every forward op validates that its output is finite: NaN/Inf anywhere is a
hard error, not a warning.
"""

import numpy as np

from . import backend

class NonFiniteError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on invalid backward usage (non-scalar loss, reuse, cycles)."""


def _as_array(values):
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """Graph node: value, lazily allocated gradient, parents + backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"


def tensor(values, requires_grad=False, name=None):
    t = Tensor(values, requires_grad=requires_grad, name=name)
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
    return t


def constant(values):
    return tensor(values, requires_grad=False)


def parameter(values, name=None):
    return tensor(values, requires_grad=True, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(op_name, data, parents, backward_fn):
    """Create a graph node; validates finiteness and prunes dead branches."""
    if not np.isfinite(data).all():
        shapes = ", ".join(str(tuple(p.shape)) for p in parents)
        raise NonFiniteError(f"non-finite values in output of {op_name} (input shapes: {shapes})")
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=tuple(parents) if needs else (),
        _backward=backward_fn if needs else None,
    )


def accumulate(node, g):
    """Add g into node.grad (allocated as zeros on first touch)."""
    if not node.requires_grad:
        return
    if g.shape != node.data.shape:
        raise GraphError(f"gradient shape {g.shape} != value shape {node.data.shape}")
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(gy):
        accumulate(a, _unbroadcast(gy, a.shape))
        accumulate(b, _unbroadcast(gy, b.shape))

    return make_node("add", out, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(gy):
        accumulate(a, _unbroadcast(gy, a.shape))
        accumulate(b, _unbroadcast(-gy, b.shape))

    return make_node("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(gy):
        accumulate(a, _unbroadcast(gy * b.data, a.shape))
        accumulate(b, _unbroadcast(gy * a.data, b.shape))

    return make_node("mul", out, (a, b), bwd)


def neg(x):
    x = _wrap(x)

    def bwd(gy):
        accumulate(x, -gy)

    return make_node("neg", -x.data, (x,), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(gy):
        accumulate(a, gy @ b.data.T)
        accumulate(b, a.data.T @ gy)

    return make_node("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(x):
    x = _wrap(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bwd(gy):
        accumulate(x, gy * out)

    return make_node("exp", out, (x,), bwd)


def log(x):
    x = _wrap(x)
    with np.errstate(all="ignore"):
        out = np.log(x.data)

    def bwd(gy):
        accumulate(x, gy / x.data)

    return make_node("log", out, (x,), bwd)


def softplus(x):
    x = _wrap(x)
    out = np.logaddexp(0.0, x.data)

    def bwd(gy):
        with np.errstate(over="ignore"):  # exp(-x) -> inf gives the correct 0
            accumulate(x, gy / (1.0 + np.exp(-x.data)))

    return make_node("softplus", out, (x,), bwd)


def tanh(x):
    x = _wrap(x)
    out = np.tanh(x.data)

    def bwd(gy):
        accumulate(x, gy * (1.0 - out * out))

    return make_node("tanh", out, (x,), bwd)


def sigmoid(x):
    x = _wrap(x)
    with np.errstate(over="ignore"):  # exp(-x) -> inf gives the correct 0
        out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(gy):
        accumulate(x, gy * out * (1.0 - out))

    return make_node("sigmoid", out, (x,), bwd)


def relu(x):
    x = _wrap(x)
    out = np.maximum(x.data, 0.0)

    def bwd(gy):
        accumulate(x, gy * (x.data > 0.0))

    return make_node("relu", out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    x = _wrap(x)
    out = x.data.reshape(shape)

    def bwd(gy):
        accumulate(x, gy.reshape(x.shape))

    return make_node("reshape", out, (x,), bwd)


def broadcast_to(x, shape):
    x = _wrap(x)
    out = np.broadcast_to(x.data, shape).copy()

    def bwd(gy):
        accumulate(x, _unbroadcast(gy, x.shape))

    return make_node("broadcast_to", out, (x,), bwd)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(gy):
        for p, g in zip(parts, np.split(gy, splits, axis=axis)):
            accumulate(p, g)

    return make_node("concat", out, tuple(parts), bwd)


def slice_(x, idx):
    x = _wrap(x)
    out = x.data[idx]
    if out.base is not None or np.shares_memory(out, x.data):
        out = out.copy()

    def bwd(gy):
        g = np.zeros_like(x.data)
        g[idx] += gy
        accumulate(x, g)

    return make_node("slice", out, (x,), bwd)


def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(gy):
        g = gy
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g))

    return make_node("sum", out, (x,), bwd)


def mean_(x, axis=None, keepdims=False):
    x = _wrap(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.data.size / max(out.size, 1)

    def bwd(gy):
        g = gy / denom
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g))

    return make_node("mean", out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, stride=1, pad=0):
    """2-D correlation of x (N,Ci,H,W) with w (Co,Ci,kh,kw), zero padding."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    xc = np.ascontiguousarray(x.data)
    wc = np.ascontiguousarray(w.data)
    out = backend.kernels.conv2d_forward(xc, wc, stride, pad)
    h, wid = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]

    def bwd(gy):
        gy = np.ascontiguousarray(gy)
        accumulate(x, backend.kernels.conv2d_input_grad(gy, wc, stride, pad, h, wid))
        accumulate(w, backend.kernels.conv2d_kernel_grad(gy, xc, stride, pad, kh, kw))

    return make_node("conv2d", out, (x, w), bwd)


def conv_transpose2d(x, w, stride=1, pad=0):
    """Transposed 2-D convolution; x (N,Ci,H,W), w (Ci,Co,kh,kw).

    Output spatial size is (H-1)*stride - 2*pad + kh.  Exact adjoint of
    conv2d with the same stride/pad.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    ho = (x.shape[2] - 1) * stride - 2 * pad + kh
    wo = (x.shape[3] - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d output would be empty for input {x.shape} kernel {w.shape}")
    xc = np.ascontiguousarray(x.data)
    wc = np.ascontiguousarray(w.data)
    out = backend.kernels.conv2d_input_grad(xc, wc, stride, pad, ho, wo)

    def bwd(gy):
        gy = np.ascontiguousarray(gy)
        accumulate(x, backend.kernels.conv2d_forward(gy, wc, stride, pad))
        accumulate(w, backend.kernels.conv2d_kernel_grad(xc, gy, stride, pad, kh, kw))

    return make_node("conv_transpose2d", out, (x, w), bwd)


def bilinear_sample(images, grid):
    """Sample images (B,C,H,W) at grid (B,G,h,w,2) of normalized coords.

    grid[..., 0] is the x (width) coordinate, grid[..., 1] the y (height)
    coordinate, both in [-1, 1] with corners mapping to the corner pixels.
    Out-of-range coordinates read as zero.  Returns (B,G,C,h,w).
    """
    images, grid = _wrap(images), _wrap(grid)
    if images.data.ndim != 4:
        raise ValueError(f"bilinear_sample expects 4-D images, got {images.shape}")
    if grid.data.ndim != 5 or grid.shape[-1] != 2:
        raise ValueError(f"bilinear_sample expects (B,G,h,w,2) grid, got {grid.shape}")
    if grid.shape[0] != images.shape[0]:
        raise ValueError(
            f"bilinear_sample batch mismatch: images {images.shape} vs grid {grid.shape}"
        )
    ic = np.ascontiguousarray(images.data)
    gc = np.ascontiguousarray(grid.data)
    out = backend.kernels.bilinear_forward(ic, gc)
    h, w = images.shape[2], images.shape[3]

    def bwd(gy):
        gy = np.ascontiguousarray(gy)
        accumulate(images, backend.kernels.bilinear_image_grad(gy, gc, h, w))
        accumulate(grid, backend.kernels.bilinear_grid_grad(gy, ic, gc))

    return make_node("bilinear_sample", out, (images, grid), bwd)


# ---------------------------------------------------------------------------
# backward driver


def _topo_order(root):
    order = []
    visiting = set()
    done = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            visiting.discard(id(node))
            done.add(id(node))
            order.append(node)
            continue
        if id(node) in done:
            continue
        if id(node) in visiting:
            raise GraphError("cycle detected in computation graph")
        visiting.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in done:
                if id(p) in visiting:
                    raise GraphError("cycle detected in computation graph")
                stack.append((p, False))
    return order


def backward(loss):
    """Populate .grad for every tensor the scalar loss depends on."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad is not None:
        raise GraphError("backward already ran for this loss; reset gradients first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any differentiable tensor")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


def clamp(x, lo, hi):
    """Differentiable clamp composed of relu ops (unit gradient inside range)."""
    return sub(add(x, relu(sub(constant(lo), x))), relu(sub(x, constant(hi))))
