"""Dense tensors with recorded forward kernels and reverse-mode differentiation.

Every operation is pure: it allocates a fresh output tensor and, when gradients
are enabled, records a backward closure. A computation record is confined to
the thread that built it; parameter tensors may be shared read-only across
threads for inference.

All kernels fail fast on NaN/Inf, naming the offending operation.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "GraphError",
    "no_grad",
    "grad_enabled",
    "relu",
    "sigmoid",
    "softmax_axis",
    "affine",
    "conv2d",
    "pad2d",
    "maxpool2d",
    "einsum2",
    "dropout",
    "cross_entropy_logits",
    "truncated_normal",
]


class NumericError(RuntimeError):
    """A kernel produced or received a NaN/Inf value."""


class GraphError(RuntimeError):
    """Backward was invoked on a tensor that cannot support it."""


_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording of backward closures (inference mode)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """n-dimensional real array with an optional gradient slot.

    ``requires_grad`` marks leaves whose ``grad`` is wanted; interior nodes
    created by operations carry the recorded backward closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _require_finite(arr, "leaf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    # -- construction of op results ------------------------------------

    @classmethod
    def _result(
        cls,
        data: np.ndarray,
        parents: Iterable["Tensor"],
        backward_fn: Optional[Callable[[np.ndarray], None]],
        op: str,
    ) -> "Tensor":
        _require_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    def _accumulate(self, grad: np.ndarray, op: str) -> None:
        _require_finite(grad, op + ".backward")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- basic introspection --------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------

    def _binary(self, other, fwd, bwd_self, bwd_other, op: str) -> "Tensor":
        if isinstance(other, Tensor):
            out_data = fwd(self.data, other.data)

            def backward(g: np.ndarray, a=self, b=other) -> None:
                if a.requires_grad:
                    a._accumulate(_unbroadcast(bwd_self(g, a.data, b.data), a.data.shape), op)
                if b.requires_grad:
                    b._accumulate(_unbroadcast(bwd_other(g, a.data, b.data), b.data.shape), op)

            return Tensor._result(out_data, (self, other), backward, op)
        const = other
        out_data = fwd(self.data, const)

        def backward_const(g: np.ndarray, a=self) -> None:
            a._accumulate(_unbroadcast(bwd_self(g, a.data, const), a.data.shape), op)

        return Tensor._result(out_data, (self,), backward_const, op)

    def __add__(self, other):
        return self._binary(
            other,
            lambda a, b: a + b,
            lambda g, a, b: g,
            lambda g, a, b: g,
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(
            other,
            lambda a, b: a - b,
            lambda g, a, b: g,
            lambda g, a, b: -g,
            "sub",
        )

    def __rsub__(self, other):
        return self._binary(
            other,
            lambda a, b: b - a,
            lambda g, a, b: -g,
            lambda g, a, b: g,
            "rsub",
        )

    def __mul__(self, other):
        return self._binary(
            other,
            lambda a, b: a * b,
            lambda g, a, b: g * b,
            lambda g, a, b: g * a,
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            lambda a, b: a / b,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
            "div",
        )

    def __rtruediv__(self, other):
        return self._binary(
            other,
            lambda a, b: b / a,
            lambda g, a, b: -g * b / (a * a),
            lambda g, a, b: g / a,
            "rdiv",
        )

    def __neg__(self):
        return self * -1.0

    def square(self) -> "Tensor":
        out_data = self.data * self.data

        def backward(g: np.ndarray, a=self) -> None:
            a._accumulate(2.0 * a.data * g, "square")

        return Tensor._result(out_data, (self,), backward, "square")

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def backward(g: np.ndarray, a=self, out=out_data) -> None:
            a._accumulate(g * 0.5 / out, "sqrt")

        return Tensor._result(out_data, (self,), backward, "sqrt")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: np.ndarray, a=self) -> None:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False), "sum")

        return Tensor._result(np.asarray(out_data), (self,), backward, "sum")

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        orig = self.data.shape

        def backward(g: np.ndarray, a=self) -> None:
            a._accumulate(g.reshape(orig), "reshape")

        return Tensor._result(out_data, (self,), backward, "reshape")

    def transpose(self, axes: tuple) -> "Tensor":
        inverse = tuple(np.argsort(axes))

        def backward(g: np.ndarray, a=self) -> None:
            a._accumulate(g.transpose(inverse), "transpose")

        return Tensor._result(self.data.transpose(axes), (self,), backward, "transpose")

    # -- reverse-mode driver ----------------------------------------------

    def backward(self) -> None:
        """Fill ``grad`` slots of every reachable requires_grad tensor.

        The receiver must be the scalar root of a recorded computation.
        """
        if self.size != 1:
            raise GraphError(f"backward requires a scalar root, got shape {self.shape}")
        if not self._parents:
            raise GraphError("backward on a tensor not produced by a recorded computation")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * (x.data > 0), "relu")

    return Tensor._result(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid exp overflow
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype, copy=False)

    def backward(g: np.ndarray, out=out_data) -> None:
        x._accumulate(g * out * (1.0 - out), "sigmoid")

    return Tensor._result(out_data, (x,), backward, "sigmoid")


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``; slices sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray, out=out_data) -> None:
        inner = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate((g - inner) * out, "softmax_axis")

    return Tensor._result(out_data, (x,), backward, "softmax_axis")


# ---------------------------------------------------------------------------
# affine / convolution / pooling
# ---------------------------------------------------------------------------


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """out = weights @ x + bias for a vector x, or batched rows of x."""
    if weights.ndim != 2 or bias.ndim != 1 or weights.shape[0] != bias.shape[0]:
        raise ValueError(f"affine parameter shapes disagree: {weights.shape}, {bias.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"affine input {x.shape} does not match weights {weights.shape}")
    out_data = x.data @ weights.data.T + bias.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weights.data, "affine")
        if weights.requires_grad:
            if g.ndim == 1:
                weights._accumulate(np.outer(g, x.data), "affine")
            else:
                weights._accumulate(g.T @ x.data, "affine")
        if bias.requires_grad:
            bias._accumulate(g if g.ndim == 1 else g.sum(axis=0), "affine")

    return Tensor._result(out_data, (x, weights, bias), backward, "affine")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # [n, c, ho, wo, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = xshape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    g = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gx = np.zeros(xshape, dtype=gcols.dtype)
    for m in range(kh):
        for nn in range(kw):
            gx[:, :, m : m + ho * stride : stride, nn : nn + wo * stride : stride] += g[:, :, :, :, m, nn]
    return gx


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid-mode 2-D cross-correlation summed over input channels, plus bias.

    ``x`` is [C_in, H, W] or [N, C_in, H, W]; kernels are [C_out, C_in, kh, kw].
    Output spatial extents are floor((H - kh) / stride) + 1 and likewise for W.
    """
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    cout, cin, kh, kw = kernels.shape
    xs = x.shape if batched else (1,) + x.shape
    if xs[1] != cin:
        raise ValueError(f"conv2d channels disagree: input {xs[1]}, kernels {cin}")
    if kh > xs[2] or kw > xs[3]:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than input {xs[2]}x{xs[3]}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")

    xd = x.data if batched else x.data[None]
    cols, ho, wo = _im2col(xd, kh, kw, stride)
    kmat = kernels.data.reshape(cout, cin * kh * kw)
    out = cols @ kmat.T + bias.data  # [n, ho*wo, cout]
    out = out.transpose(0, 2, 1).reshape(xd.shape[0], cout, ho, wo)
    if not batched:
        out = out[0]

    def backward(g: np.ndarray) -> None:
        gb = g if batched else g[None]
        gmat = gb.reshape(gb.shape[0], cout, ho * wo).transpose(0, 2, 1)  # [n, ho*wo, cout]
        if kernels.requires_grad:
            gk = np.einsum("npo,npk->ok", gmat, cols, optimize=True)
            kernels._accumulate(gk.reshape(kernels.shape), "conv2d")
        if bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2, 3)), "conv2d")
        if x.requires_grad:
            gcols = gmat @ kmat  # [n, ho*wo, cin*kh*kw]
            gx = _col2im(gcols, xd.shape, kh, kw, stride)
            x._accumulate(gx if batched else gx[0], "conv2d")

    return Tensor._result(out, (x, kernels, bias), backward, "conv2d")


def pad2d(x: Tensor, pad: tuple) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pad
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out_data = np.pad(x.data, width)
    sl = tuple([slice(None)] * (x.ndim - 2) + [slice(top, out_data.shape[-2] - bottom), slice(left, out_data.shape[-1] - right)])

    def backward(g: np.ndarray) -> None:
        x._accumulate(g[sl], "pad2d")

    return Tensor._result(out_data, (x,), backward, "pad2d")


def maxpool2d(x: Tensor, window: tuple, stride: int, zero_pad: bool = False) -> Tensor:
    """Max pooling over [C, H, W] or [N, C, H, W].

    With ``zero_pad`` the input is zero-extended on the bottom/right so output
    extents are ceil(H / stride) x ceil(W / stride); otherwise valid mode.
    """
    ph, pw = window
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"maxpool2d input must be 3-D or 4-D, got shape {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if zero_pad:
        ho = -(-h // stride)
        wo = -(-w // stride)
        hp = max((ho - 1) * stride + ph, h)
        wp = max((wo - 1) * stride + pw, w)
        xp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
        xp[:, :, :h, :w] = xd
    else:
        if ph > h or pw > w:
            raise ValueError(f"maxpool2d window {window} larger than input {h}x{w}")
        ho = (h - ph) // stride + 1
        wo = (w - pw) // stride + 1
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (ph, pw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # [n, c, ho, wo, ph, pw]
    flat = win.reshape(n, c, ho, wo, ph * pw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_final = out if batched else out[0]

    def backward(g: np.ndarray) -> None:
        gb = g if batched else g[None]
        hi = (np.arange(ho) * stride)[None, None, :, None] + arg // pw
        wi = (np.arange(wo) * stride)[None, None, None, :] + arg % pw
        ni, ci = np.indices((n, c))[:, :, :, None, None]
        ni = np.broadcast_to(ni, arg.shape)
        ci = np.broadcast_to(ci, arg.shape)
        valid = (hi < h) & (wi < w)  # a zero-pad cell winning the max gets no gradient
        gx = np.zeros((n, c, h, w), dtype=gb.dtype)
        np.add.at(gx, (ni[valid], ci[valid], hi[valid], wi[valid]), gb[valid])
        x._accumulate(gx if batched else gx[0], "maxpool2d")

    return Tensor._result(out_final, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------------------
# contractions / regularizers / losses
# ---------------------------------------------------------------------------


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Differentiable two-operand einsum.

    Restricted to specs where each operand's indices are distinct and every
    index appears in the other operand or the output, so gradients are again
    two-operand einsums.
    """
    lhs, out_idx = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for name, s, other in (("first", sa, sb), ("second", sb, sa)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum2 {name} operand repeats an index: {spec!r}")
        missing = set(s) - set(out_idx) - set(other)
        if missing:
            raise ValueError(f"einsum2 cannot differentiate {spec!r}: index {missing} summed from one side only")
    out_data = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.einsum(f"{out_idx},{sb}->{sa}", g, b.data, optimize=True), "einsum2")
        if b.requires_grad:
            b._accumulate(np.einsum(f"{out_idx},{sa}->{sb}", g, a.data, optimize=True), "einsum2")

    return Tensor._result(out_data, (a, b), backward, "einsum2")


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units scaled by 1/keep_prob so inference needs no rescale."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout keep_prob must be in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob).astype(x.data.dtype) / keep_prob

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask, "dropout")

    return Tensor._result(x.data * mask, (x,), backward, "dropout")


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy; scalar mean over the batch.

    ``logits`` is [K] with an int label or [B, K] with B int labels.
    """
    single = logits.ndim == 1
    ld = logits.data[None] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != ld.shape[0]:
        raise ValueError(f"cross_entropy_logits labels {lab.shape} do not match logits {logits.shape}")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + ld.max(axis=1)
    picked = ld[np.arange(ld.shape[0]), lab]
    out = np.asarray((lse - picked).mean(), dtype=ld.dtype)

    def backward(g: np.ndarray) -> None:
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(ld.shape[0]), lab] -= 1.0
        p *= g / ld.shape[0]
        logits._accumulate(p[0] if single else p, "cross_entropy_logits")

    return Tensor._result(out, (logits,), backward, "cross_entropy_logits")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape: tuple, std: float = 0.1, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
