"""Minimal dense tensor engine with reverse-mode autodiff.

Only the operations the retrieval pipeline needs are provided: dilated 2D
convolution, relu, addition, scalar scaling, summation and matrix product.
Every op records a closure on its output; ``Tensor.backward`` walks the
recorded graph once and then releases it (single-use tape).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the dimension."""


class ConfigError(ValueError):
    """Invalid hyperparameter or layer configuration."""


class UsageError(RuntimeError):
    """API used out of order (e.g. backward without a recorded forward)."""


class Tensor:
    """N-d float64 array with an optional gradient buffer.

    ``grad`` is allocated lazily during ``backward`` for nodes that require
    gradients. Leaves created by the user are the trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self._consumed:
            raise UsageError("backward called twice on the same tape; rerun the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward called on a tensor that does not require grad")

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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be positive, got {self.dilation}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")

    def receptive_field(self, k: int) -> int:
        return (k - 1) * self.dilation + 1

    def out_extent(self, size: int, k: int, axis: str = "H") -> int:
        span = self.receptive_field(k)
        out = (size + 2 * self.padding - span) // self.stride + 1
        if size + 2 * self.padding < span or out < 1:
            raise ShapeError(
                f"{axis}={size} with padding {self.padding} is smaller than the dilated kernel extent {span}"
            )
        return out


def _tap_slices(kh: int, kw: int, ho: int, wo: int, spec: ConvSpec):
    s, d = spec.stride, spec.dilation
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(i * d, i * d + s * (ho - 1) + 1, s), slice(j * d, j * d + s * (wo - 1) + 1, s))


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, spec: ConvSpec) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i, j, (sh, sw) in _tap_slices(kh, kw, ho, wo, spec):
        cols[:, :, i, j] = xp[:, :, sh, sw]
    return cols


def _conv_backward(g, cols, weight, x_shape, spec: ConvSpec):
    """Return (input_grad, weight_grad, bias_grad) for a recorded conv2d."""
    n, c, h, w = x_shape
    k, _, kh, kw = weight.shape
    ho, wo = g.shape[2:]
    # g: (N,K,Ho,Wo); cols: (N,C,kh,kw,Ho,Wo)
    dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
    db = g.sum(axis=(0, 2, 3))
    dcols = np.tensordot(weight, g, axes=([0], [1]))  # (C,kh,kw,N,Ho,Wo)
    p = spec.padding
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i, j, (sh, sw) in _tap_slices(kh, kw, ho, wo, spec):
        dxp[:, :, sh, sw] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None, **kw) -> Tensor:
    """Dilated 2D cross-correlation with zero padding.

    ``out[n,k,y,x] = sum_{c,i,j} in[n,c,y*s+i*d-pad, x*s+j*d-pad] * w[k,c,i,j] + b[k]``
    """
    spec = spec or ConvSpec(**kw)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d (K,C,kh,kw), got shape {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw_ = weight.shape
    if cw != c:
        raise ShapeError(f"channel dimension C mismatch: input has {c}, weight expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"bias must have shape ({k},) to match output channels K, got {bias.shape}")
    ho = spec.out_extent(h, kh, "H")
    wo = spec.out_extent(w, kw_, "W")
    p = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw_, ho, wo, spec)
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # (K,N,Ho,Wo)
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    w_data = weight.data
    x_shape = x.shape

    def backward(g):
        dx, dw, db = _conv_backward(g, cols, w_data, x_shape, spec)
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# elementwise and reductions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("add_n needs at least one operand")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n operands differ in shape: {shape} vs {t.shape}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    return _result(total, tensors, lambda g: tuple(g for _ in tensors))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights (handy as a probe loss)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError(f"weights shape {weights.shape} does not match tensor shape {x.shape}")
    return _result(np.array((x.data * weights).sum()), (x,), lambda g: (g * weights,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def mean_rows(tensors: Sequence[Tensor]) -> Tensor:
    return scale(add_n(tensors), 1.0 / len(tensors))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` must rebuild the computation from ``params`` on every call and
    return a scalar. The error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    out = fn()
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar output, got shape {out.shape}")
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = fn()
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(fn().data)
            flat[idx] = orig - eps
            down = float(fn().data)
            flat[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
        err = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
        if err > worst:
            worst = err
        logger.debug("grad_check %s: %.3e", p.name or p.shape, err)
    return worst
