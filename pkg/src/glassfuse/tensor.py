"""Dense float tensors with reverse-mode automatic differentiation.

Everything downstream (fusion module, segmentation network, trainer) is
built from the operations in this file.  Tensors wrap a numpy array plus
an optional gradient; operations record closures on their output so that
``Tensor.backward`` can replay the chain rule over the implicit DAG.

Conventions:
  * feature maps are NCHW, float32 for training, float64 for gradient
    checking;
  * forward functions are pure -- they never mutate their inputs;
  * reductions that feed channel statistics (``global_avg_pool``) sort
    before summing, so results are bit-identical under any spatial
    permutation of the input.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "sub",
    "elementwise",
    "scale",
    "neg",
    "relu",
    "log",
    "clamp",
    "reshape",
    "narrow",
    "concat",
    "softmax",
    "sigmoid",
    "mean_all",
    "sum_all",
    "global_avg_pool",
    "fully_connected",
    "conv2d",
    "bilinear_upsample",
    "finite_diff_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes cannot be combined by an operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus the bookkeeping for reverse-mode autodiff.

    ``data`` is always a float32 or float64 numpy array.  Leaf tensors
    created with ``requires_grad=True`` act as trainable parameters;
    operation outputs carry a ``_backward`` closure and references to
    their parents, forming the recorded graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def grad_array(self) -> np.ndarray:
        """Gradient, with ``None`` (parameter off the loss path) read as zero."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    # -- backward pass ----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Visits each recorded node exactly once in reverse topological
        order and accumulates gradients into every reachable tensor that
        requires one.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and (parent.requires_grad or parent._parents):
                    stack.append((parent, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and backward is not None and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------


def _broadcast_second(a: Tensor, b: Tensor) -> tuple[np.ndarray, tuple[int, ...] | None]:
    """Return b's data viewable against a, plus the axes summed in backward.

    Allowed: identical shapes, or b of shape [C] / [N,C,1,1] against a's
    [N,C,h,w] (the per-channel weight restoration path).
    """
    if b.shape == a.shape:
        return b.data, None
    if a.data.ndim == 4:
        n, c, _, _ = a.shape
        if b.shape == (c,):
            return b.data.reshape(1, c, 1, 1), (0, 2, 3)
        if b.shape == (n, c, 1, 1):
            return b.data, (2, 3)
    raise ShapeMismatchError(f"cannot broadcast operand of shape {b.shape} against {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...] | None) -> np.ndarray:
    if axes is None:
        return g
    return g.sum(axis=axes).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    bb, axes = _broadcast_second(a, b)
    data = a.data + bb

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, _reduce_to(g, b.shape, axes))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bb, axes = _broadcast_second(a, b)
    data = a.data * bb

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * bb)
        _accumulate(b, _reduce_to(g * a.data, b.shape, axes))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bb, axes = _broadcast_second(a, b)
    data = a.data - bb

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, _reduce_to(-g, b.shape, axes))

    return _make(data, (a, b), backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Pointwise combination of two tensors, ``kind`` in {"add", "mul"}."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    data = a.data * f

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * f)

    return _make(data, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0))

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    data = np.clip(a.data, lo, hi)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * ((a.data > lo) & (a.data < hi)))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _make(data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeMismatchError(
                f"concat along axis {axis}: shape {p.shape} incompatible with {ref}"
            )
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g: np.ndarray) -> None:
        idx = [slice(None)] * g.ndim
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _make(data, parts, backward)


# ---------------------------------------------------------------------------
# reductions and dense layers
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    data = e / s

    def backward(g: np.ndarray) -> None:
        inner = np.sum(g * data, axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _make(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.sum() / n, dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(data, (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """Per-channel spatial mean of an NCHW map, output [N,C,1,1].

    Values are sorted before summation so the result is bit-identical
    under any spatial permutation of the input.
    """
    if a.data.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW input, got shape {a.shape}")
    n, c, h, w = a.shape
    flat = np.sort(a.data.reshape(n, c, h * w), axis=2)
    data = (flat.sum(axis=2) / (h * w)).reshape(n, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g / (h * w), a.shape))

    return _make(data, (a,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N,Cin] x [Cout,Cin] + [Cout] -> [N,Cout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"fully_connected: input {x.shape} incompatible with weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(
            f"fully_connected: bias {bias.shape} incompatible with weight {weight.shape}"
        )
    data = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        _accumulate(bias, g.sum(axis=0))

    return _make(data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    i0 = np.repeat(np.arange(kh), kw).reshape(-1, 1)
    j0 = np.tile(np.arange(kw), kh).reshape(-1, 1)
    i1 = (stride * np.repeat(np.arange(ho), wo)).reshape(1, -1)
    j1 = (stride * np.tile(np.arange(wo), ho)).reshape(1, -1)
    cols = x[:, :, i0 + i1, j0 + j1]  # (N, C, kh*kw, Ho*Wo)
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    for a in range(kh):
        for b in range(kw):
            dx[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += dcols[:, :, a, b]
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + w]
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel plus bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise ShapeMismatchError(
            f"conv2d: input has {cin} channels but kernel expects {cin_k} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    if bias.shape != (cout,):
        raise ShapeMismatchError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols) + bias.data.reshape(1, cout, 1)
    data = out.reshape(n, cout, ho, wo)

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(n, cout, ho * wo)
        _accumulate(kernel, np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape))
        _accumulate(bias, gm.sum(axis=(0, 2)))
        dcols = np.matmul(wmat.T, gm)
        _accumulate(x, _col2im(dcols, x.shape, kh, kw, stride, padding, ho, wo))

    return _make(data, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix (align-corners-false)."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for i in range(n_out):
        center = (i + 0.5) * ratio - 0.5
        center = min(max(center, 0.0), n_in - 1.0)
        lo = int(np.floor(center))
        hi = min(lo + 1, n_in - 1)
        frac = dtype(center - lo)
        mat[i, lo] += dtype(1.0) - frac
        mat[i, hi] += frac
    return mat


def bilinear_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear interpolation of an NCHW map to at-least-as-large spatial dims."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"bilinear_upsample expects NCHW input, got shape {x.shape}")
    _, _, h, w = x.shape
    if target_h < h or target_w < w:
        raise ValueError(
            f"bilinear_upsample target {target_h}x{target_w} smaller than input {h}x{w}"
        )
    dt = x.data.dtype.type
    ly = _interp_matrix(target_h, h, dt)
    lx = _interp_matrix(target_w, w, dt)
    data = np.matmul(np.matmul(ly, x.data), lx.T)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.matmul(np.matmul(ly.T, g), lx))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    fn: Callable[[], Tensor],
    parameters: Tensor | Iterable[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar-valued graph to central differences.

    ``fn`` rebuilds the graph from the given leaf parameters on every
    call.  Parameters must be float64; per coordinate the relative error
    is |analytic - numeric| / max(1, |numeric|) and the maximum over all
    coordinates is returned.
    """
    params = [parameters] if isinstance(parameters, Tensor) else list(parameters)
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite_diff_check requires float64 parameters")
        p.zero_grad()
    loss = fn()
    if loss.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued fn")
    loss.backward()
    analytic = [p.grad_array().copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fn().data)
            flat[i] = orig - epsilon
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(ana[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
