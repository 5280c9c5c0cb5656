"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery for a small transformer: elementwise arithmetic,
matmul (with leading batch dimensions), masked row softmax, layer norm,
GELU, sigmoid/softplus, reductions, reshapes and basic indexing.  The
computation graph doubles as the tape; ``backward`` walks it once in
reverse topological order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "DegenerateRowError",
    "matmul",
    "linear",
    "softmax_rows",
    "attention_probs",
    "layer_norm",
    "gelu",
    "sigmoid",
    "softplus",
    "concat",
    "backward",
]

# Optional finite-value guard on every primitive output; enabled in tests,
# off by default in the training hot loop (the loop checks the loss itself).
CHECK_FINITE = False


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no unmasked entries."""


def _check(values: np.ndarray) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced by a primitive")
    return values


class Tensor:
    """A float64 array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents, backward_fn) -> "Tensor":
        out = cls(_check(np.asarray(data, dtype=np.float64)))
        track = any(p.requires_grad for p in parents)
        if track:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    # -- introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )
        return out

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._from_op(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("divide by a constant instead")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __getitem__(self, idx):
        data = self.data[idx]

        parts = idx if isinstance(idx, tuple) else (idx,)
        fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

        def back(g):
            full = np.zeros_like(self.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return Tensor._from_op(data, (self,), back)

    # -- reductions / shaping ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return Tensor._from_op(data, (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def backward(self):
        backward(self)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    """Matrix product (optionally scaled); leading dimensions broadcast."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)
    if scale != 1.0:
        data *= scale

    def back(g):
        if scale != 1.0:
            g = g * scale
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor._from_op(data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b (bias broadcast over leading dimensions)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear inner extents differ: {x.data.shape} vs {w.data.shape}"
        )
    data = np.matmul(x.data, w.data)
    data += b.data

    def back(g):
        gx = np.matmul(g, w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, w.data.shape[0]).T @ g2
        gb = g2.sum(axis=0)
        return (gx, gw, gb)

    return Tensor._from_op(data, (x, w, b), back)


def softmax_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax over the last axis with hard masking.

    Masked entries are exactly 0 in the output; each row is normalized over
    its unmasked entries after max-subtraction for stability.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("softmax row with every entry masked")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return Tensor._from_op(s, (x,), back)


def attention_probs(q: Tensor, k: Tensor, mask: np.ndarray, scale: float) -> Tensor:
    """Fused scaled q @ k^T followed by masked row softmax.

    Semantically identical to ``softmax_rows(matmul(q, k^T, scale), mask)``
    but computed in place; the hot path of every attention layer.
    """
    mask = np.asarray(mask, dtype=bool)
    z = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    z *= scale
    full_mask = np.broadcast_to(mask, z.shape)
    if not full_mask.any(axis=-1).all():
        raise DegenerateRowError("attention row with every key masked")
    np.copyto(z, -np.inf, where=~full_mask)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    s = z

    def back(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        dz = s * (g - dot)
        dq = np.matmul(dz, k.data)
        dq *= scale
        dk = np.matmul(np.swapaxes(dz, -1, -2), q.data)
        dk *= scale
        return (dq, dk)

    return Tensor._from_op(s, (q, k), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def back(g):
        dz = g * gain.data
        dx = inv * (
            dz
            - dz.mean(axis=-1, keepdims=True)
            - xhat * (dz * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return (dx, dgain, dbias)

    return Tensor._from_op(data, (x, gain, bias), back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + 0.044715 * (x2 * x.data)))
    data = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 0.134145 * x2)
        dt = (1.0 - t * t) * du
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * dt),)

    return Tensor._from_op(data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def back(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (x,), back)


def softplus(x: Tensor) -> Tensor:
    data = np.logaddexp(0.0, x.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))

    def back(g):
        return (g * sig,)

    return Tensor._from_op(data, (x,), back)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tuple(tensors), back)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Execution-order tape recovered from the graph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already run on this tape; rerun the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached: no requires_grad input reaches it")
    loss._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            # requires_grad leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
