"""
Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive is a ``Function`` subclass with a ``forward`` rule producing the output
array and a ``backward`` rule mapping the output gradient to one gradient per input.
Applying a primitive records a ``TapeEntry`` on its output whenever any input requires
grad; ``backward(root)`` collects the entries reachable from ``root`` into a
``ComputationTape`` ordered by recording sequence and replays it in reverse.
"""

import contextlib
import itertools
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when input shapes do not conform to a primitive's rule"""


class GradientError(RuntimeError):
    """Raised for invalid backward roots or missing gradients"""


_GRAD_ENABLED = True
_SEQUENCE = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, finite differences)"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeEntry:
    """One recorded primitive application"""

    __slots__ = ("seq", "function", "inputs", "output")

    def __init__(self, seq: int, function: "Function", inputs: Tuple["Tensor", ...], output: "Tensor"):
        self.seq = seq
        self.function = function
        self.inputs = inputs
        self.output = output


class Tensor:
    """Dense row-major float64 array with an optional gradient"""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._entry: Optional[TapeEntry] = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # ------------------------------------------------------------------
    # Operator sugar
    # ------------------------------------------------------------------

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

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# Function protocol
# ----------------------------------------------------------------------

class Function:
    """Base class for a differentiable primitive"""

    name = "function"

    @classmethod
    def apply(cls, *inputs, **params) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        out = Tensor(fn.forward(*[t.data for t in tensors], **params))
        if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._entry = TapeEntry(next(_SEQUENCE), fn, tensors, out)
        return out

    def forward(self, *arrays: np.ndarray, **params) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class MatMul(Function):
    """(..., K) @ (K, N) -> (..., N)"""

    name = "matmul"

    def forward(self, a, b):
        if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a2 = self.a.reshape(-1, self.a.shape[-1])
        g2 = grad.reshape(-1, self.b.shape[1])
        ga = (g2 @ self.b.T).reshape(self.a.shape)
        gb = a2.T @ g2
        return ga, gb


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                    arr.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis % ref.ndim):
                raise ShapeError(f"concat: incompatible shapes {[x.shape for x in arrays]} along axis {axis}")
        self.axis = axis
        self.sizes = [x.shape[axis] for x in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Slice(Function):
    name = "slice"

    def forward(self, a, index=None):
        self.shape = a.shape
        self.index = index
        try:
            return np.array(a[index], dtype=np.float64)
        except IndexError as exc:
            raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.index, grad)
        return (full,)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=None):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Permute(Function):
    name = "permute"

    def forward(self, a, axes=None):
        if axes is None or sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        if axis is None:
            self.count = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            self.count = int(np.prod([a.shape[d] for d in axes]))
        if self.count == 0:
            raise ShapeError(f"mean: empty reduction over shape {a.shape} axis {axis}")
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Max(Function):
    """Ties share the gradient equally"""

    name = "max"

    def forward(self, a, axis=None, keepdims=False):
        self.a, self.axis, self.keepdims = a, axis, keepdims
        self.out = np.max(a, axis=axis, keepdims=True)
        return np.asarray(self.out if keepdims else np.max(a, axis=axis, keepdims=False))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        mask = (self.a == self.out).astype(np.float64)
        mask /= mask.sum(axis=self.axis, keepdims=True)
        return (mask * grad,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0.0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        e = np.exp(-np.abs(a))
        self.out = np.where(a >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        with np.errstate(divide="ignore"):
            return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Sqrt(Function):
    """Derivative at 0 is taken as 0"""

    name = "sqrt"

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        safe = np.where(self.out > 0.0, self.out, 1.0)
        return (np.where(self.out > 0.0, grad / (2.0 * safe), 0.0),)


class Pow(Function):
    """Elementwise power with a constant exponent"""

    name = "pow"

    def forward(self, a, exponent=2.0):
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class LayerNorm(Function):
    """Normalise over the last axis, no affine parameters"""

    name = "layer_norm"

    def forward(self, a, eps=1e-5):
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (a - mu) * self.inv_std
        return self.xhat

    def backward(self, grad):
        xhat = self.xhat
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * xhat).mean(axis=-1, keepdims=True)
        return (self.inv_std * (grad - g_mean - xhat * gx_mean),)


class GatherRows(Function):
    """rows (N, C...) gathered by an integer index array of any shape"""

    name = "gather_rows"

    def forward(self, a, index=None):
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
            raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.index.reshape(-1),
                  grad.reshape((-1,) + tuple(self.shape[1:])))
        return (full,)


class ScatterAdd(Function):
    """rows (M, C...) summed into ``num_rows`` output rows at ``index`` (M,)"""

    name = "scatter_add"

    def forward(self, a, index=None, num_rows=0):
        index = np.asarray(index, dtype=np.int64)
        if index.shape != (a.shape[0],):
            raise ShapeError(f"scatter_add: index shape {index.shape} does not match rows {a.shape}")
        if index.size and (index.min() < 0 or index.max() >= num_rows):
            raise ShapeError(f"scatter_add: index out of range for {num_rows} output rows")
        self.index = index
        out = np.zeros((num_rows,) + a.shape[1:])
        np.add.at(out, index, a)
        return out

    def backward(self, grad):
        return (grad[self.index],)


class GlobalAveragePool(Function):
    """(C, H, W) -> (C,)"""

    name = "global_average_pool"

    def forward(self, a):
        if a.ndim != 3:
            raise ShapeError(f"global_average_pool: expected (C, H, W), got {a.shape}")
        self.shape = a.shape
        return a.mean(axis=(1, 2))

    def backward(self, grad):
        c, h, w = self.shape
        return (np.broadcast_to(grad[:, None, None] / (h * w), self.shape).copy(),)


class Conv2d(Function):
    """Single-sample 2D cross-correlation: x (C, H, W), w (O, C, kh, kw)"""

    name = "conv2d"

    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        c, h, wd = x.shape
        o, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        windows = windows[:, ::stride, ::stride][:, :ho, :wo]
        # cols: (C*kh*kw, ho*wo)
        cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
        self.cols, self.w, self.stride, self.padding = cols, w, stride, padding
        self.xp_shape, self.out_hw = xp.shape, (ho, wo)
        return (w.reshape(o, -1) @ cols).reshape(o, ho, wo)

    def backward(self, grad):
        o, c, kh, kw = self.w.shape
        ho, wo = self.out_hw
        s, p = self.stride, self.padding
        g2 = grad.reshape(o, -1)
        gw = (g2 @ self.cols.T).reshape(self.w.shape)
        gcols = (self.w.reshape(o, -1).T @ g2).reshape(c, kh, kw, ho, wo)
        gxp = np.zeros(self.xp_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
        h, wd = self.xp_shape[1] - 2 * p, self.xp_shape[2] - 2 * p
        return gxp[:, p:p + h, p:p + wd], gw


class SmoothL1(Function):
    name = "smooth_l1"

    def forward(self, a, beta=1.0):
        self.a, self.beta = a, beta
        absa = np.abs(a)
        return np.where(absa < beta, 0.5 * a * a / beta, absa - 0.5 * beta)

    def backward(self, grad):
        a, beta = self.a, self.beta
        return (grad * np.where(np.abs(a) < beta, a / beta, np.sign(a)),)


class Clamp(Function):
    """Derivative at and beyond the bounds is 0"""

    name = "clamp"

    def forward(self, a, lo=None, hi=None):
        lo_v = -np.inf if lo is None else lo
        hi_v = np.inf if hi is None else hi
        self.mask = (a > lo_v) & (a < hi_v)
        return np.clip(a, lo_v, hi_v)

    def backward(self, grad):
        return (grad * self.mask,)


# ----------------------------------------------------------------------
# Functional API
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def slice_(a, index) -> Tensor:
    return Slice.apply(a, index=index)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def permute(a, axes) -> Tensor:
    return Permute.apply(a, axes=tuple(axes))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    return Max.apply(a, axis=axis, keepdims=keepdims)


def relu(a) -> Tensor:
    return Relu.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def log(a) -> Tensor:
    return Log.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


def power(a, exponent: float) -> Tensor:
    return Pow.apply(a, exponent=exponent)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(a, eps=eps)


def gather_rows(a, index) -> Tensor:
    return GatherRows.apply(a, index=index)


def scatter_add(a, index, num_rows: int) -> Tensor:
    return ScatterAdd.apply(a, index=index, num_rows=num_rows)


def global_average_pool(a) -> Tensor:
    return GlobalAveragePool.apply(a)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    if bias is not None:
        out = add(out, reshape(bias, (-1, 1, 1)))
    return out


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    return SmoothL1.apply(a, beta=beta)


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    return Clamp.apply(a, lo=lo, hi=hi)


PRIMITIVES: Dict[str, type] = {
    cls.name: cls
    for cls in (Add, Sub, Mul, Div, MatMul, Concat, Slice, Reshape, Permute, Sum, Mean, Max,
                Relu, Sigmoid, Softmax, Log, Exp, Sqrt, Pow, LayerNorm, GatherRows, ScatterAdd,
                GlobalAveragePool, Conv2d, SmoothL1, Clamp)
}


def forward_primitive(op: str, inputs: Sequence[Union[Tensor, ArrayLike]], **params) -> Tensor:
    """Apply a primitive by name"""
    try:
        cls = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"Unknown primitive '{op}'. Available: {sorted(PRIMITIVES)}") from None
    return cls.apply(*inputs, **params)


# ----------------------------------------------------------------------
# Tape replay
# ----------------------------------------------------------------------

class ComputationTape:
    """Entries reachable from a root, in recording order"""

    def __init__(self, entries: List[TapeEntry]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        seen = set()
        entries: List[TapeEntry] = []
        stack = [root]
        while stack:
            tensor = stack.pop()
            entry = tensor._entry
            if entry is None or id(entry) in seen:
                continue
            seen.add(id(entry))
            entries.append(entry)
            stack.extend(entry.inputs)
        entries.sort(key=lambda e: e.seq)
        return cls(entries)

    def leaves(self) -> List[Tensor]:
        found: Dict[int, Tensor] = {}
        for entry in self.entries:
            for t in entry.inputs:
                if t.requires_grad and t.is_leaf:
                    found.setdefault(id(t), t)
        return list(found.values())

    def replay_backward(self, root: Tensor) -> None:
        grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for entry in reversed(self.entries):
            grad = grads.pop(id(entry.output), None)
            if grad is None:
                continue
            input_grads = entry.function.backward(grad)
            for tensor, g in zip(entry.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                else:
                    key = id(tensor)
                    grads[key] = grads[key] + g if key in grads else g
        for leaf in self.leaves():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from a scalar root"""
    if root.data.size != 1:
        raise GradientError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.is_leaf:
        if root.requires_grad:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    ComputationTape.from_root(root).replay_backward(root)
