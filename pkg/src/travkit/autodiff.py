"""Reverse-mode automatic differentiation on numpy arrays.

A small tape engine covering exactly the operations the sensor VAE and the
visual decoder need: elementwise arithmetic, matrix products, 1-D
convolution, ReLU, reductions, exp/log/sqrt and interval clipping. All
computation is float64. Calling ``backward()`` on a scalar result fills the
``grad`` field of every reachable node that requires gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "relu", "conv1d", "finite_difference_check"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Computation-graph node wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self) -> None:
        """Backpropagate from a scalar node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._wrap(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._node(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / other.data**2, other.data.shape)
                )

        return Tensor._node(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        out_data = self.data**e

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * e * self.data ** (e - 1.0))

        return Tensor._node(out_data, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._wrap(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._node(out_data, (self, other), backward)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return Tensor._node(out_data, (self,), backward)

    def log(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        return Tensor._node(np.log(self.data), (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out_data)

        return Tensor._node(out_data, (self,), backward)

    def clip(self, lo: float, hi: float):
        """Clamp to [lo, hi]; gradient passes through the open interior only."""
        mask = (self.data > lo) & (self.data < hi)
        _record_kink(np.minimum(np.abs(self.data - lo), np.abs(self.data - hi)))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor._node(np.clip(self.data, lo, hi), (self,), backward)

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._node(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis] if isinstance(axis, int) else int(
                np.prod([self.data.shape[a] for a in axis])
            )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old_shape))

        return Tensor._node(out_data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inverse = np.argsort(axes)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inverse))

        return Tensor._node(self.data.transpose(axes), (self,), backward)

    def narrow(self, start: int, stop: int):
        """Contiguous row slice along the first axis."""

        def backward(g):
            if self.requires_grad:
                gg = np.zeros_like(self.data)
                gg[start:stop] = g
                self._accumulate(gg)

        return Tensor._node(self.data[start:stop], (self,), backward)


_KINK_TRACE: list | None = None


class trace_kink_margins:
    """Records how close ReLU/clip inputs come to their kinks.

    Central finite differences are invalid when a perturbation of size eps
    crosses a kink; gradient-check harnesses use this trace to reject such
    instances up front instead of comparing a meaningless estimate.
    """

    def __enter__(self):
        global _KINK_TRACE
        self._prev = _KINK_TRACE
        _KINK_TRACE = []
        return self

    def __exit__(self, *exc):
        global _KINK_TRACE
        self._vals = _KINK_TRACE
        _KINK_TRACE = self._prev
        return False

    @property
    def min_margin(self) -> float:
        return min(self._vals) if self._vals else float("inf")


def _record_kink(dist: np.ndarray) -> None:
    if _KINK_TRACE is not None and dist.size:
        _KINK_TRACE.append(float(dist.min()))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_kink(np.abs(x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._node(np.where(mask, x.data, 0.0), (x,), backward)


def _sliding_windows(x: np.ndarray, k: int) -> np.ndarray:
    """View of shape (B, C, T-k+1, k) over the last axis of (B, C, T)."""
    b, c, t = x.shape
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, t - k + 1, k), (s0, s1, s2, s2), writeable=False
    )


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Batched 1-D convolution with 'same' zero padding.

    x: (B, C_in, T), weight: (C_out, C_in, K), bias: (C_out,).
    Returns (B, C_out, T).
    """
    bsz, c_in, t = x.data.shape
    c_out, c_in_w, k = weight.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, weight {c_in_w}")
    pad_l = (k - 1) // 2
    pad_r = k - 1 - pad_l
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r)))
    wins = _sliding_windows(xpad, k)  # (B, C_in, T, K)
    out_data = np.einsum("bctk,ock->bot", wins, weight.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("bot,bctk->ock", g, wins, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gfull = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
            gwins = _sliding_windows(gfull, k)  # (B, C_out, T + K - 1, K)
            w_flip = weight.data[:, :, ::-1]
            gxpad = np.einsum("bosk,ock->bcs", gwins, w_flip, optimize=True)
            x._accumulate(gxpad[:, :, pad_l : pad_l + t])

    return Tensor._node(out_data, parents, backward)


def finite_difference_check(loss_fn, params: list, eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `loss_fn()` must rebuild the graph from `params` (leaf Tensors) and
    return a scalar Tensor; it is re-evaluated under elementwise
    perturbations. Relative error uses max(1, |g_ad|, |g_fd|) as denominator.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.ravel()
        ga_flat = ga.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            gf = (hi - lo) / (2.0 * eps)
            err = abs(ga_flat[i] - gf) / max(1.0, abs(ga_flat[i]), abs(gf))
            worst = max(worst, err)
    return worst
