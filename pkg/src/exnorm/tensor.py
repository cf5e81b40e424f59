"""Dense tensors with reverse-mode differentiation.

A `Tensor` wraps a numpy array of at most four axes (N, C, H, W order).
Every operation in this module records its parents and a gradient function
on the result when any input requires a gradient, so the graph of a forward
pass is the tape that `backward` replays in reverse.  Graphs are built anew
on every forward pass and may be backpropagated once.

Broadcasting is deliberately narrow.  The second operand of a binary
operation may be a scalar, a per-channel vector (matched against axis 1), or
a "reduced-axes" array of the same rank whose extents are each either equal
to the first operand's or 1, which is the shape of a keepdims moment.
"""

from __future__ import annotations

__all__ = [
    "GradientMap",
    "MAX_RANK",
    "Tensor",
    "as_tensor",
    "backward",
    "broadcast_to",
    "conv2d",
    "elementwise",
    "exp",
    "global_avg_pool",
    "log",
    "matmul",
    "mean",
    "pairwise_correlation",
    "relu",
    "repeat",
    "reshape",
    "softmax_cross_entropy",
    "softmax_rows",
    "sqrt",
    "stack",
    "tanh",
    "tensor_sum",
]

from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np
import structlog

from exnorm.types import (
    BackwardError,
    DetachedParameterError,
    NonFiniteError,
    ShapeMismatchError,
)

MAX_RANK = 4
"""Largest number of axes a tensor may have."""

Axes = Union[None, int, Tuple[int, ...]]
GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
GradientMap = Dict[str, np.ndarray]
Operand = Union["Tensor", float, int]

logger = structlog.get_logger(__name__)


class Tensor:
    """A dense numeric array that can take part in differentiation.

    Parameters
    ----------
    data: Array-like values.  Floating numpy arrays keep their precision,
      anything else is converted to 64-bit floats unless ``dtype`` is given.
    requires_grad: Whether gradients should flow to this tensor.
    name: Name used in gradient maps and error messages.
    """

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
        _parents: Tuple[Tensor, ...] = (),
        _grad_fn: Optional[GradFn] = None,
        _op: str = "leaf",
    ) -> None:
        if dtype is None:
            array = np.asarray(data)
            if array.dtype not in (np.float32, np.float64):
                array = array.astype(np.float64)
        else:
            array = np.asarray(data, dtype=dtype)
        if array.ndim > MAX_RANK:
            raise ShapeMismatchError(
                f"Tensors have at most {MAX_RANK} axes, got {array.shape}"
            )
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.op = _op
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._backpropagated = False

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} {self.op} shape={self.shape}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(
                f"item() needs a single value, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def detach(self) -> Tensor:
        """Return a constant tensor sharing these values."""
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Operand) -> Tensor:
        return elementwise("add", self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return elementwise("add", self, other)

    def __sub__(self, other: Operand) -> Tensor:
        return elementwise("sub", self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return elementwise("add", -self, other)

    def __mul__(self, other: Operand) -> Tensor:
        return elementwise("mul", self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return elementwise("mul", self, other)

    def __truediv__(self, other: Operand) -> Tensor:
        return elementwise("div", self, other)

    def __neg__(self) -> Tensor:
        return _unary(self, np.negative(self.data), lambda g: -g, "neg")

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        source = self.data

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            full = np.zeros_like(source)
            np.add.at(full, index, g)
            return (full,)

        return _result(
            np.asarray(source[index]), (self,), grad_fn, "index"
        )

    def reshape(self, shape: Sequence[int]) -> Tensor:
        return reshape(self, shape)

    def sum(self, axes: Axes = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axes, keepdims)

    def mean(self, axes: Axes = None, keepdims: bool = False) -> Tensor:
        return mean(self, axes, keepdims)


def as_tensor(value: Operand, dtype: Any = None) -> Tensor:
    """Wrap scalars and arrays as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


def _result(
    data: np.ndarray,
    parents: Tuple[Tensor, ...],
    grad_fn: GradFn,
    op: str,
) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(
            data,
            requires_grad=True,
            _parents=parents,
            _grad_fn=grad_fn,
            _op=op,
        )
    return Tensor(data, _op=op)


def _unary(
    x: Tensor,
    out: np.ndarray,
    local: Callable[[np.ndarray], np.ndarray],
    op: str,
) -> Tensor:
    out = out.astype(x.dtype, copy=False)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (local(g).astype(x.dtype, copy=False),)

    return _result(out, (x,), grad_fn, op)


def _normalize_axes(axes: Axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an upstream gradient back down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(
        i
        for i, (gs, s) in enumerate(zip(g.shape, shape))
        if s == 1 and gs != 1
    )
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _align_operand(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Bring ``b`` into one of the accepted broadcast patterns against a."""
    if b.shape == a.shape or b.ndim == 0:
        return b
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[1]:
        return reshape(b, (1, b.shape[0]) + (1,) * (a.ndim - 2))
    if b.ndim == a.ndim and all(
        bs in (1, s) for bs, s in zip(b.shape, a.shape)
    ):
        return b
    raise ShapeMismatchError(
        f"Cannot {kind} shapes {a.shape} and {b.shape}"
    )


def elementwise(kind: str, a: Operand, b: Operand) -> Tensor:
    """Apply ``add``, ``sub``, ``mul`` or ``div`` elementwise.

    The result always has ``a``'s shape and dtype; ``b`` is broadcast into
    it following the module's narrow broadcasting rules.
    """
    left = as_tensor(a)
    right = _align_operand(left, as_tensor(b, dtype=left.dtype), kind)
    x, y = left.data, right.data
    dtype = x.dtype

    if kind == "add":
        out = x + y

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g, _unbroadcast(g, y.shape))

    elif kind == "sub":
        out = x - y

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (g, _unbroadcast(-g, y.shape))

    elif kind == "mul":
        out = x * y

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (
                (g * y).astype(dtype, copy=False),
                _unbroadcast((g * x).astype(dtype, copy=False), y.shape),
            )

    elif kind == "div":
        out = x / y

        def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (
                (g / y).astype(dtype, copy=False),
                _unbroadcast(
                    (-g * x / (y * y)).astype(dtype, copy=False), y.shape
                ),
            )

    else:
        raise ValueError(f"Unknown elementwise operation {kind}")

    out = np.asarray(out).astype(dtype, copy=False)
    return _result(out, (left, right), grad_fn, kind)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _unary(x, out, lambda g: g * 0.5 / out, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out, "exp")


def log(x: Tensor) -> Tensor:
    data = x.data
    return _unary(x, np.log(data), lambda g: g / data, "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1.0 - out * out), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0), lambda g: g * mask, "relu")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    source_shape = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError(
            f"Cannot reshape {source_shape} to {tuple(shape)}"
        )

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g.reshape(source_shape),)

    return _result(out, (x,), grad_fn, "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand the unit axes of ``x`` to ``shape`` without changing rank."""
    target = tuple(shape)
    if x.ndim != len(target) or any(
        s not in (1, t) for s, t in zip(x.shape, target)
    ):
        raise ShapeMismatchError(f"Cannot broadcast {x.shape} to {target}")
    source_shape = x.shape

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (_unbroadcast(g, source_shape),)

    out = np.broadcast_to(x.data, target).copy()
    return _result(out, (x,), grad_fn, "broadcast")


def tensor_sum(x: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    reduced = _normalize_axes(axes, x.ndim)
    source_shape = x.shape
    out = np.sum(x.data, axis=reduced, keepdims=keepdims, dtype=np.float64)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if not keepdims:
            g = np.expand_dims(g, reduced)
        return (np.broadcast_to(g, source_shape).astype(x.dtype),)

    return _result(
        np.asarray(out).astype(x.dtype), (x,), grad_fn, "sum"
    )


def mean(x: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes``, accumulated in 64 bits."""
    reduced = _normalize_axes(axes, x.ndim)
    source_shape = x.shape
    count = int(np.prod([source_shape[a] for a in reduced]))
    if count == 0:
        raise ShapeMismatchError(f"Cannot average over empty axes {reduced}")
    out = np.mean(x.data, axis=reduced, keepdims=keepdims, dtype=np.float64)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if not keepdims:
            g = np.expand_dims(g, reduced)
        return ((np.broadcast_to(g, source_shape) / count).astype(x.dtype),)

    return _result(
        np.asarray(out).astype(x.dtype), (x,), grad_fn, "mean"
    )


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Stack equally shaped tensors along a new axis."""
    if not tensors:
        raise ShapeMismatchError("Cannot stack an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"Cannot stack shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _result(out, tuple(tensors), grad_fn, "stack")


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each entry along ``axis`` ``repeats`` times, like np.repeat."""
    axis = axis % x.ndim
    source_shape = x.shape

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        split = (
            g.shape[:axis]
            + (source_shape[axis], repeats)
            + g.shape[axis + 1 :]
        )
        return (g.reshape(split).sum(axis=axis + 1),)

    return _result(
        np.repeat(x.data, repeats, axis=axis), (x,), grad_fn, "repeat"
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"Cannot multiply matrices {a.shape} and {b.shape}"
        )
    x, y = a.data, b.data

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g @ y.T, x.T @ g)

    return _result(x @ y, (a, b), grad_fn, "matmul")


def conv2d(
    x: Tensor,
    w: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Direct grouped 2-D cross-correlation without bias.

    ``x`` is N×Cin×H×W and ``w`` is Cout×(Cin/groups)×kh×kw.  The loop runs
    over kernel offsets; each offset is one contraction over the input
    channels of every group.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d needs 4-D input and weights, got {x.shape}, {w.shape}"
        )
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeMismatchError(
            f"Channels {cin}->{cout} are not divisible by {groups} groups"
        )
    if cin_g != cin // groups:
        raise ShapeMismatchError(
            f"Weights {w.shape} do not match input {x.shape} "
            f"with {groups} groups"
        )
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatchError(
            f"Kernel {kh}x{kw} is larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cout_g = cout // groups

    padded = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
    )
    xg = padded.reshape(n, groups, cin_g, hp, wp)
    wg = w.data.reshape(groups, cout_g, cin_g, kh, kw)

    def window(i: int, j: int) -> Tuple[slice, slice]:
        return (
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride),
        )

    out = np.zeros((n, groups, cout_g, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rows, cols = window(i, j)
            out += np.einsum(
                "ngchw,goc->ngohw",
                xg[:, :, :, rows, cols],
                wg[:, :, :, i, j],
                optimize=True,
            )

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gg = g.reshape(n, groups, cout_g, ho, wo)
        dxg = np.zeros_like(xg)
        dwg = np.zeros_like(wg)
        for i in range(kh):
            for j in range(kw):
                rows, cols = window(i, j)
                dwg[:, :, :, i, j] = np.einsum(
                    "ngohw,ngchw->goc",
                    gg,
                    xg[:, :, :, rows, cols],
                    optimize=True,
                )
                dxg[:, :, :, rows, cols] += np.einsum(
                    "ngohw,goc->ngchw", gg, wg[:, :, :, i, j], optimize=True
                )
        dx = dxg.reshape(n, cin, hp, wp)[
            :, :, padding : padding + h, padding : padding + wd
        ]
        return (np.ascontiguousarray(dx), dwg.reshape(w.shape))

    return _result(
        out.reshape(n, cout, ho, wo), (x, w), grad_fn, "conv2d"
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Average each N×C map over its spatial extent, giving N×C."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeMismatchError(
            f"global_avg_pool needs N×C×H×W input, got {x.shape}"
        )
    return mean(x, (2, 3))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an N×K tensor, stabilized by max subtraction."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs N×K, got {x.shape}")
    if np.isnan(x.data).any():
        raise NonFiniteError("softmax_rows received NaN logits")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _result(out.astype(x.dtype, copy=False), (x,), grad_fn, "softmax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row softmax."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"Logits {logits.shape} do not match labels {labels.shape}"
        )
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -np.mean(log_probs[rows, labels], dtype=np.float64)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return ((probs * (g / n)).astype(logits.dtype),)

    return _result(
        np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "xent"
    )


def pairwise_correlation(z: Tensor) -> Tensor:
    """Flattened per-sample Gram matrices: N×K×D gives N×(K·K)."""
    if z.ndim != 3:
        raise ShapeMismatchError(
            f"pairwise_correlation needs N×K×D, got {z.shape}"
        )
    n, k, _ = z.shape
    data = z.data
    out = np.einsum("nkd,njd->nkj", data, data).reshape(n, k * k)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gram = g.reshape(n, k, k)
        sym = gram + gram.transpose(0, 2, 1)
        return (np.einsum("nkj,njd->nkd", sym, data),)

    return _result(out, (z,), grad_fn, "correlation")


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: Set[int] = set()
    pending: List[Tuple[Tensor, bool]] = [(root, False)]
    while pending:
        node, expanded = pending.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        pending.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                pending.append((parent, False))
    return order


def backward(
    loss: Tensor, params: Optional[Sequence[Tensor]] = None
) -> GradientMap:
    """Backpropagate a scalar loss through the graph that produced it.

    Gradients accumulate into the ``grad`` of every reachable leaf that
    requires one.  Returns the gradients of named leaves by name.

    Parameters
    ----------
    loss: Scalar tensor produced by tracked operations.
    params: Optional parameters that must be reachable; any that are not are
      reported by name in a `DetachedParameterError`.
    """
    if loss.size != 1:
        raise BackwardError(f"Loss must be scalar, got shape {loss.shape}")
    if loss._backpropagated:
        raise BackwardError(
            "Graph was already backpropagated; run a fresh forward pass"
        )
    if not loss.requires_grad:
        raise DetachedParameterError([loss.name or f"<{loss.op} output>"])

    order = _topological_order(loss)
    if params is not None:
        reachable = {id(node) for node in order}
        missing = [
            p.name or repr(p) for p in params if id(p) not in reachable
        ]
        if missing:
            raise DetachedParameterError(missing)

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    grads: GradientMap = {}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                grads[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise BackwardError(
                    f"Adjoint {pg.shape} from {node.op} does not match "
                    f"{parent.shape}"
                )
            if id(parent) in adjoints:
                adjoints[id(parent)] = adjoints[id(parent)] + pg
            else:
                adjoints[id(parent)] = pg
    loss._backpropagated = True
    return grads
