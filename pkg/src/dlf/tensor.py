"""Dense float64 arrays with reverse-mode differentiation.

A `Tensor` wraps a numpy float64 array and records, per result, the list
of (parent, local-gradient rule) pairs needed to backpropagate a scalar
loss. The op set is exactly what the flow layers need: elementwise
arithmetic, exp/log/tanh/relu, axis reductions, structural reshapes,
channel split/concat, same-padded 1x1 and 3x3 convolutions, a per-channel
linear map, and log|det| of a square matrix.

Everything is eager and single-threaded; graphs are acyclic by
construction and `backward` visits each node once in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inverse passes, sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


GradRule = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """A float64 array plus optional autodiff provenance."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[tuple["Tensor", GradRule], ...] = ()
        self._backprop_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, _as_tensor(other))

    def __radd__(self, other):
        return _binary("add", _as_tensor(other), self)

    def __sub__(self, other):
        return _binary("sub", self, _as_tensor(other))

    def __rsub__(self, other):
        return _binary("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return _binary("mul", self, _as_tensor(other))

    def __rmul__(self, other):
        return _binary("mul", _as_tensor(other), self)

    def __truediv__(self, other):
        return _binary("div", self, _as_tensor(other))

    def __rtruediv__(self, other):
        return _binary("div", _as_tensor(other), self)

    def __neg__(self):
        out = _result(-self.data, (self, lambda g: -g))
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return _result(y, (self, lambda g: g * y))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError("log requires strictly positive input")
        return _result(np.log(self.data), (self, lambda g: g / self.data))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return _result(y, (self, lambda g: g * (1.0 - y * y)))

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        return _result(np.where(mask, self.data, 0.0), (self, lambda g: g * mask))

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        y = self.data.sum(axis=axes)
        kept = _keepdims_shape(self.shape, axes)
        return _result(
            y, (self, lambda g: np.broadcast_to(g.reshape(kept), self.shape).copy())
        )

    def mean(self, axis=None) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        y = self.data.mean(axis=axes)
        kept = _keepdims_shape(self.shape, axes)
        count = self.data.size if axes is None else int(
            np.prod([self.shape[a] for a in axes])
        )
        return _result(
            y,
            (
                self,
                lambda g: np.broadcast_to(g.reshape(kept), self.shape) / count,
            ),
        )

    # -- structure -----------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        return _result(
            self.data.reshape(shape), (self, lambda g: g.reshape(self.shape))
        )

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
        return _result(
            self.data.transpose(axes), (self, lambda g: g.transpose(inv))
        )

    # -- backward ------------------------------------------------------

    def backward(self, accumulate: bool = False) -> None:
        """Propagate d(self)/d(ancestor) into every requires_grad ancestor.

        Repeated calls on the same node are rejected unless `accumulate`
        is set, in which case gradient contributions add on top of
        whatever is already stored.
        """
        if self.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        if self._backprop_done and not accumulate:
            raise ContractError(
                "backward already ran for this node; pass accumulate=True "
                "or rebuild the graph"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, rule in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = rule(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib
        self._backprop_done = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, *parents: tuple[Tensor, GradRule]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p, _ in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(
            f"{kind}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None
    if kind == "add":
        return _result(
            a.data + b.data,
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        )
    if kind == "sub":
        return _result(
            a.data - b.data,
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        )
    if kind == "mul":
        return _result(
            a.data * b.data,
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        )
    if kind == "div":
        if np.any(b.data == 0.0):
            raise DomainError("div: divisor contains zero")
        y = a.data / b.data
        return _result(
            y,
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * y / b.data, b.shape)),
        )
    raise ContractError(f"unknown elementwise kind {kind!r}")


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ContractError(f"axis {a} out of range for rank {ndim}")
        axes.append(a % ndim)
    if len(set(axes)) != len(axes):
        raise ContractError("duplicate reduction axis")
    return tuple(sorted(axes))


def _keepdims_shape(shape: tuple[int, ...], axes) -> tuple[int, ...]:
    if axes is None:
        return (1,) * len(shape)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat requires at least one tensor")
    axis = axis % parts[0].ndim
    data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + extents)

    def make_rule(i: int) -> GradRule:
        sl = [slice(None)] * parts[0].ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _result(data, *[(p, make_rule(i)) for i, p in enumerate(parts)])


def channel_split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the trailing (channel) axis into blocks of `sizes`."""
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes):
        raise ContractError("split sizes must be positive")
    if sum(sizes) != x.shape[-1]:
        raise ContractError(
            f"split sizes {sizes} do not sum to channel count {x.shape[-1]}"
        )
    offsets = np.cumsum([0] + sizes)
    parts = []
    for i in range(len(sizes)):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        piece = x.data[..., lo:hi]

        def make_rule(lo=lo, hi=hi) -> GradRule:
            def rule(g: np.ndarray) -> np.ndarray:
                full = np.zeros(x.shape)
                full[..., lo:hi] = g
                return full

            return rule

        parts.append(_result(piece, (x, make_rule())))
    return parts


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 convolution, NHWC input, (kh, kw, ci, co) kernel."""
    if x.ndim != 4:
        raise ContractError(f"conv2d input must be NHWC, got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ContractError("conv2d kernel must have shape (kh, kw, ci, co)")
    kh, kw, ci, co = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ContractError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if ci != x.shape[-1]:
        raise ContractError(
            f"conv2d channel mismatch: input has {x.shape[-1]}, kernel expects {ci}"
        )
    if bias is not None and bias.shape != (co,):
        raise ContractError(f"conv2d bias must have shape ({co},)")

    n, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    y = np.zeros((n, h, w, co))
    for i in range(kh):
        for j in range(kw):
            y += np.tensordot(
                xp[:, i : i + h, j : j + w, :], kernel.data[i, j], axes=([3], [0])
            )
    if bias is not None:
        y += bias.data

    def dx(g: np.ndarray) -> np.ndarray:
        gp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gp[:, i : i + h, j : j + w, :] += np.tensordot(
                    g, kernel.data[i, j], axes=([3], [1])
                )
        return gp[:, ph : ph + h, pw : pw + w, :]

    def dk(g: np.ndarray) -> np.ndarray:
        gk = np.zeros(kernel.shape)
        for i in range(kh):
            for j in range(kw):
                gk[i, j] = np.tensordot(
                    xp[:, i : i + h, j : j + w, :], g, axes=([0, 1, 2], [0, 1, 2])
                )
        return gk

    parents = [(x, dx), (kernel, dk)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=(0, 1, 2))))
    return _result(y, *parents)


def channel_linear(x: Tensor, w: Tensor) -> Tensor:
    """y[..., a] = sum_b w[a, b] * x[..., b]; the 1x1-convolution core."""
    if w.ndim != 2:
        raise ContractError("channel_linear weight must be a matrix")
    if w.shape[1] != x.shape[-1]:
        raise ContractError(
            f"channel_linear mismatch: input has {x.shape[-1]} channels, "
            f"weight expects {w.shape[1]}"
        )
    y = np.tensordot(x.data, w.data, axes=([-1], [1]))
    lead = tuple(range(x.ndim - 1))

    return _result(
        y,
        (x, lambda g: np.tensordot(g, w.data, axes=([-1], [0]))),
        (w, lambda g: np.tensordot(g, x.data, axes=(lead, lead))),
    )


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| of a square matrix, via LU with partial pivoting."""
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ContractError("logabsdet requires a square matrix")
    sign, logdet = np.linalg.slogdet(w.data)
    if sign == 0.0:
        raise DomainError("logabsdet: matrix is singular")
    inv_t = None

    def dw(g: np.ndarray) -> np.ndarray:
        nonlocal inv_t
        if inv_t is None:
            inv_t = np.linalg.inv(w.data).T
        return g * inv_t

    return _result(np.asarray(logdet), (w, dw))
