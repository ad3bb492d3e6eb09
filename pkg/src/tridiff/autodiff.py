"""Minimal reverse-mode automatic differentiation over dense real tensors.

A :class:`Tensor` wraps a contiguous numpy array. Operations on tensors
record a computation graph (operands precede results), and
:func:`gradient` runs a single deterministic backward pass over the
reverse topological order. Gradients accumulate by summation in a fixed
order, so two backward passes over the same graph are bit-identical.

Supported operations cover what the samplers and the toy score networks
need: elementwise add/sub/mul (tensor-tensor of equal shape, or
tensor-scalar), matmul, affine layers, 1D/2D valid convolution,
reductions (sum, mean, squared L2 norm), tanh and SiLU nonlinearities,
flat-index gather/scatter (slicing, masking, zero padding), block-mean
pooling, complex magnitude with a zero-at-zero gradient convention, and
clip with a pass-through-inside subgradient. General broadcasting,
higher-order derivatives and GPU execution are out of scope.
"""

from __future__ import annotations

import numpy as np
from scipy import signal

from .validation import ShapeError, check_finite, check_same_shape

__all__ = [
    "Tensor",
    "GraphError",
    "constant",
    "evaluate",
    "gradient",
    "check_gradient",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "matmul",
    "affine",
    "tensor_sum",
    "mean",
    "sq_norm",
    "tanh",
    "silu",
    "gather",
    "scatter",
    "reshape",
    "conv1d",
    "conv2d",
    "block_mean",
    "magnitude",
    "clip",
    "custom_vjp",
]


class GraphError(RuntimeError):
    """Raised for structural misuse of the computation graph."""


def _wrap(value, like=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=False)


def _is_scalar_operand(x) -> bool:
    return np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)


class Tensor:
    """Dense real tensor participating in a recorded computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op_name", "_meta")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self.op_name = "leaf"
        self._meta = None

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def _node(value: np.ndarray, parents, vjp, op_name: str, meta=None) -> "Tensor":
        check_finite(value, op_name)
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(value, order="C")
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._vjp = vjp if out.requires_grad else None
        out.op_name = op_name
        out._meta = meta
        return out

    # -- basic protocol ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op_name}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(data) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor(data, requires_grad=False)


def evaluate(fn, *inputs: Tensor) -> Tensor:
    """Apply a composed-op callable to tensors, returning the forward value."""
    out = fn(*inputs)
    if not isinstance(out, Tensor):
        raise TypeError("evaluate: expression must return a Tensor")
    return out


# -- elementwise and scalar arithmetic -----------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    if _is_scalar_operand(b) or (isinstance(b, Tensor) and b.ndim == 0):
        b = _wrap(b)
        value = a.data + b.data

        def vjp(g):
            return g, np.sum(g).reshape(b.data.shape)

        return Tensor._node(value, (a, b), vjp, "add")
    b = _wrap(b)
    if a.ndim == 0:
        return add(b, a)
    check_same_shape(a.shape, b.shape, "add")

    def vjp(g):
        return g, g

    return Tensor._node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if b.ndim == 0 and a.ndim != 0:
        def vjp(g):
            return g, -np.sum(g).reshape(b.data.shape)
        return Tensor._node(a.data - b.data, (a, b), vjp, "sub")
    if a.ndim == 0 and b.ndim != 0:
        def vjp(g):
            return np.sum(g).reshape(a.data.shape), -g
        return Tensor._node(a.data - b.data, (a, b), vjp, "sub")
    check_same_shape(a.shape, b.shape, "sub")

    def vjp(g):
        return g, -g

    return Tensor._node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b)
    if b.ndim == 0 and a.ndim != 0:
        def vjp(g):
            return g * b.data, np.sum(g * a.data).reshape(b.data.shape)
        return Tensor._node(a.data * b.data, (a, b), vjp, "mul")
    if a.ndim == 0 and b.ndim != 0:
        return mul(b, a)
    check_same_shape(a.shape, b.shape, "mul")

    def vjp(g):
        return g * b.data, g * a.data

    return Tensor._node(a.data * b.data, (a, b), vjp, "mul")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    value = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        # 1D @ 1D -> scalar
        return g * bd, g * ad

    return Tensor._node(value, (a, b), vjp, "matmul")


def affine(x, weight, bias) -> Tensor:
    """x @ weight + bias, with the bias broadcast over rows of a 2D x."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"affine: weight must be 2D and bias 1D, got {weight.shape}, {bias.shape}")
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"affine: shape mismatch x{x.shape} W{weight.shape} b{bias.shape}")
    value = x.data @ weight.data + bias.data

    def vjp(g):
        if x.data.ndim == 2:
            return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)
        return g @ weight.data.T, np.outer(x.data, g), g

    return Tensor._node(value, (x, weight, bias), vjp, "affine")


# -- reductions -----------------------------------------------------------


def tensor_sum(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (np.full(a.shape, float(g), dtype=a.data.dtype),)

    return Tensor._node(np.asarray(a.data.sum()), (a,), vjp, "sum")


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.size

    def vjp(g):
        return (np.full(a.shape, float(g) / n, dtype=a.data.dtype),)

    return Tensor._node(np.asarray(a.data.mean()), (a,), vjp, "mean")


def sq_norm(a) -> Tensor:
    """Squared L2 norm of all entries."""
    a = _wrap(a)

    def vjp(g):
        return (2.0 * float(g) * a.data,)

    return Tensor._node(np.asarray(np.sum(a.data * a.data)), (a,), vjp, "sq_norm")


# -- nonlinearities -------------------------------------------------------


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return Tensor._node(t, (a,), vjp, "tanh")


def silu(a) -> Tensor:
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    value = a.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return Tensor._node(value, (a,), vjp, "silu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Elementwise clip to [lo, hi].

    Subgradient convention: pass-through strictly inside the interval,
    zero outside and exactly at the boundary. The node records a region
    code per element (-1 below, 0 inside, +1 above, 2 exactly at a
    boundary) so gradient checks can flag kink-ambiguous coordinates.
    """
    a = _wrap(a)
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got ({lo}, {hi})")
    inside = (a.data > lo) & (a.data < hi)
    at_kink = (a.data == lo) | (a.data == hi)
    codes = np.where(inside, 0, np.where(a.data < lo, -1, 1)).astype(np.int8)
    codes[at_kink] = 2

    def vjp(g):
        return (g * inside,)

    return Tensor._node(np.clip(a.data, lo, hi), (a,), vjp, "clip", meta=codes)


# -- indexing / shaping ----------------------------------------------------


def gather(a, flat_indices) -> Tensor:
    """Select entries of a by flat index, producing a 1D tensor."""
    a = _wrap(a)
    idx = np.asarray(flat_indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise IndexError(f"gather: index out of range for tensor of size {a.size}")
    value = a.data.reshape(-1)[idx]

    def vjp(g):
        acc = np.bincount(idx, weights=g.astype(np.float64), minlength=a.size)
        return (acc.reshape(a.shape).astype(a.data.dtype),)

    return Tensor._node(value, (a,), vjp, "gather")


def scatter(a, flat_indices, out_shape) -> Tensor:
    """Place a 1D tensor's entries at flat positions of a zero tensor."""
    a = _wrap(a)
    idx = np.asarray(flat_indices, dtype=np.intp)
    if a.ndim != 1 or idx.shape != a.shape:
        raise ShapeError(f"scatter: need 1D input matching indices, got {a.shape} vs {idx.shape}")
    if len(np.unique(idx)) != idx.size:
        raise ValueError("scatter: duplicate target indices")
    out = np.zeros(int(np.prod(out_shape)), dtype=a.data.dtype)
    out[idx] = a.data

    def vjp(g):
        return (g.reshape(-1)[idx],)

    return Tensor._node(out.reshape(out_shape), (a,), vjp, "scatter")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor._node(a.data.reshape(shape), (a,), vjp, "reshape")


# -- convolution and pooling ----------------------------------------------


def conv1d(x, kernel) -> Tensor:
    """Valid cross-correlation of a 1D signal with a 1D kernel."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 1 or kernel.ndim != 1:
        raise ShapeError(f"conv1d: need 1D operands, got {x.shape}, {kernel.shape}")
    if kernel.size > x.size:
        raise ShapeError(f"conv1d: kernel {kernel.shape} longer than signal {x.shape}")
    value = np.correlate(x.data, kernel.data, mode="valid")

    def vjp(g):
        gx = np.convolve(g, kernel.data, mode="full")
        gk = np.correlate(x.data, g, mode="valid")
        return gx, gk

    return Tensor._node(value, (x, kernel), vjp, "conv1d")


def conv2d(x, kernel) -> Tensor:
    """Valid cross-correlation of a 2D image with a 2D kernel."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"conv2d: need 2D operands, got {x.shape}, {kernel.shape}")
    if kernel.shape[0] > x.shape[0] or kernel.shape[1] > x.shape[1]:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than image {x.shape}")
    value = signal.correlate2d(x.data, kernel.data, mode="valid")

    def vjp(g):
        gx = signal.convolve2d(g, kernel.data, mode="full")
        gk = signal.correlate2d(x.data, g, mode="valid")
        return gx, gk

    return Tensor._node(value, (x, kernel), vjp, "conv2d")


def block_mean(x, factor: int) -> Tensor:
    """Average pooling over non-overlapping factor x factor blocks."""
    x = _wrap(x)
    f = int(factor)
    if x.ndim != 2:
        raise ShapeError(f"block_mean: need 2D input, got {x.shape}")
    h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"block_mean: shape {x.shape} not divisible by factor {f}")
    value = x.data.reshape(h // f, f, w // f, f).mean(axis=(1, 3))

    def vjp(g):
        return (np.kron(g, np.ones((f, f), dtype=x.data.dtype)) / (f * f),)

    return Tensor._node(value, (x,), vjp, "block_mean")


def magnitude(re, im) -> Tensor:
    """Elementwise sqrt(re^2 + im^2); gradient defined as 0 at exact zeros."""
    re, im = _wrap(re), _wrap(im)
    check_same_shape(re.shape, im.shape, "magnitude")
    value = np.hypot(re.data, im.data)
    safe = np.where(value > 0.0, value, 1.0)

    def vjp(g):
        scale = g / safe
        nz = value > 0.0
        return (np.where(nz, scale * re.data, 0.0), np.where(nz, scale * im.data, 0.0))

    return Tensor._node(value, (re, im), vjp, "magnitude")


def custom_vjp(value: np.ndarray, parents, vjp, name: str) -> Tensor:
    """Register a composite operation with a hand-derived backward rule.

    vjp receives the upstream gradient array and must return one gradient
    array per parent, each matching the parent's shape.
    """
    parents = tuple(_wrap(p) for p in parents)
    return Tensor._node(np.asarray(value), parents, vjp, name)


# -- backward pass ----------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede results


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every reachable tensor."""
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward: root does not require gradients")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if pg.shape != p.data.shape:
                pg = pg.reshape(p.data.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def gradient(expr: Tensor, wrt: Tensor) -> Tensor:
    """d(expr)/d(wrt) for a scalar expr, as a tensor shaped like wrt."""
    if not isinstance(expr, Tensor) or not isinstance(wrt, Tensor):
        raise TypeError("gradient: expr and wrt must be Tensors")
    if expr.data.size != 1:
        raise GraphError(f"gradient: expr must be scalar, got shape {expr.shape}")
    if not wrt.requires_grad:
        raise GraphError("gradient: wrt does not require gradients")
    order = _topo_order(expr)
    if not any(node is wrt for node in order):
        raise GraphError("gradient: wrt did not participate in the forward pass")
    for node in order:
        node.grad = None
    backward(expr)
    g = wrt.grad if wrt.grad is not None else np.zeros_like(wrt.data)
    return Tensor(g.copy(), requires_grad=False)


# -- gradient checking -------------------------------------------------------


class GradCheckReport:
    """Result of comparing reverse-mode gradients to central differences."""

    def __init__(self, max_rel_err, rel_err, passed, ambiguous):
        self.max_rel_err = max_rel_err
        self.rel_err = rel_err
        self.passed = passed
        self.ambiguous = ambiguous  # flat coordinates where FD crosses a kink

    def __repr__(self):
        return (
            f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
            f"passed={self.passed}, ambiguous={sorted(self.ambiguous)})"
        )


def _clip_signature(root: Tensor) -> list:
    return [n._meta for n in _topo_order(root) if n.op_name == "clip"]


def _signatures_differ(sig_a, sig_b) -> bool:
    for ca, cb in zip(sig_a, sig_b):
        if ca.shape != cb.shape or not np.array_equal(ca, cb):
            return True
    return len(sig_a) != len(sig_b)


def check_gradient(fn, x0: np.ndarray, step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare the reverse-mode gradient of fn against central differences.

    fn maps a Tensor to a scalar Tensor. Coordinates whose perturbation
    changes a clip region (or sits exactly on a clip boundary) are
    reported as subgradient-ambiguous instead of counting as failures.
    """
    if step <= 0:
        raise ValueError(f"check_gradient: step must be positive, got {step}")
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = fn(leaf)
    g_rev = gradient(out, leaf).data.reshape(-1)

    flat = x0.reshape(-1)
    g_fd = np.zeros_like(flat)
    ambiguous: set[int] = set()
    for j in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += step
        xm[j] -= step
        # requires_grad so the graph (and clip region codes) is recorded
        out_p = fn(Tensor(xp.reshape(x0.shape), requires_grad=True))
        out_m = fn(Tensor(xm.reshape(x0.shape), requires_grad=True))
        g_fd[j] = (out_p.item() - out_m.item()) / (2.0 * step)
        sig_p = _clip_signature(out_p)
        sig_m = _clip_signature(out_m)
        if sig_p and _signatures_differ(sig_p, sig_m):
            ambiguous.add(j)

    denom = np.maximum(np.maximum(np.abs(g_rev), np.abs(g_fd)), 1e-8)
    rel = np.abs(g_rev - g_fd) / denom
    smooth = np.ones(flat.size, dtype=bool)
    for j in ambiguous:
        smooth[j] = False
    max_rel = float(rel[smooth].max()) if smooth.any() else 0.0
    return GradCheckReport(max_rel, rel.reshape(x0.shape), max_rel < tol, ambiguous)
