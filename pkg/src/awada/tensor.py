"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the output
gradient to input gradients. The graph is rebuilt on every forward pass and
there are no in-place operations. Binary operations require identical shapes;
Python scalars are accepted as constants.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

LOG_EPS = 1e-12

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GradientError(RuntimeError):
    """Raised on invalid backward calls or non-finite gradients."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op",
                 "_fresh", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors support up to 4 dimensions, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = _op
        # leaves that require grad always own a buffer; constants never do
        self.grad = np.zeros_like(arr) if (self.requires_grad and not _parents) else None
        self._fresh = True

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)
            self._fresh = True

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; multiply by a reciprocal constant")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        if exponent != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def sum(self, axes=None) -> "Tensor":
        return reduce_sum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce_mean(self, axes)

    # ------------------------------------------------------------- backward
    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf that requires grad.

        A leaf that already received a gradient since its last ``zero_grad`` makes
        the call fail, so gradients are never silently accumulated twice.
        """
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        leaves = [t for t in order if t.is_leaf and t.requires_grad]
        stale = [t for t in leaves if not t._fresh]
        if stale:
            label = stale[0].name or repr(stale[0])
            raise GradientError(f"gradient of {label} already populated; call zero_grad() before backward again")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for leaf in leaves:
            leaf._fresh = False


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else (), _op=op)
    if requires:
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data + c, (a,), "add_const", lambda g: (g,))
    a = as_tensor(a)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        if isinstance(b, np.ndarray):
            if b.shape != a.shape:
                raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
            c = np.asarray(b, dtype=np.float64)
            return _result(a.data * c, (a,), "mul_const", lambda g: (g * c,))
        c = float(b)
        return _result(a.data * c, (a,), "scale", lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), "square", lambda g: (2.0 * ad * g,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), "abs", lambda g: (g * np.sign(ad),))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, 1e-12)``; the clamp also zeroes the gradient below it."""
    ad = a.data
    clamped = np.maximum(ad, LOG_EPS)
    mask = ad >= LOG_EPS
    return _result(np.log(clamped), (a,), "log", lambda g: (np.where(mask, g / clamped, 0.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    factor = np.where(x > 0, 1.0, slope)
    return _result(x * factor, (a,), "leaky_relu", lambda g: (g * factor,))


def elementwise(op: str, *args, slope: float = 0.2) -> Tensor:
    """Dispatch by name: add, sub, mul, abs, log, tanh, sigmoid, leaky_relu."""
    table = {"add": add, "sub": sub, "mul": mul, "abs": absolute, "log": log,
             "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "square": square}
    if op == "leaky_relu":
        return leaky_relu(*args, slope=slope)
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ------------------------------------------------------------------ reductions

def _norm_axes(a: Tensor, axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {a.shape}")
        norm.append(ax % a.ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"repeated axes {axes}")
    return tuple(sorted(norm))


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a, axes)
    if a.size == 0:
        raise ShapeError("reduction over an empty tensor")
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _result(a.data.sum(axis=axes), (a,), "sum", backward)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a, axes)
    if a.size == 0:
        raise ShapeError("reduction over an empty tensor")
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).copy(),)

    return _result(a.data.sum(axis=axes) / count, (a,), "mean", backward)


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    if op == "sum":
        return reduce_sum(a, axes)
    if op == "mean":
        return reduce_mean(a, axes)
    raise ValueError(f"unknown reduction {op!r}")


# ------------------------------------------------------------------ structural

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial slice of an NCHW tensor."""
    if a.ndim != 4:
        raise ShapeError(f"crop2d expects NCHW, got {a.shape}")
    _, _, H, W = a.shape
    if top < 0 or left < 0 or top + height > H or left + width > W or height < 1 or width < 1:
        raise ShapeError(f"crop ({top},{left},{height},{width}) outside {H}x{W}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return _result(a.data[:, :, top:top + height, left:left + width], (a,), "crop2d", backward)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the last two axes."""
    if a.ndim < 2 or a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ShapeError(f"upsample2x needs spatial dims >= 1, got {a.shape}")
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)
    lead = a.shape[:-2]
    H, W = a.shape[-2:]

    def backward(g):
        return (g.reshape(lead + (H, 2, W, 2)).sum(axis=(-3, -1)),)

    return _result(out, (a,), "upsample2x", backward)


def avgpool2x(a: Tensor) -> Tensor:
    H, W = a.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x needs even spatial dims, got {a.shape}")
    lead = a.shape[:-2]
    out = a.data.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return _result(out, (a,), "avgpool2x", backward)


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), "softmax", backward)


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation of an NCHW tensor (no affine)."""
    if a.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW, got {a.shape}")
    x = a.data
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), "instance_norm", backward)


# ----------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an (Cout, Cin, kh, kw) kernel."""
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv2d stride must be a positive int, got {stride!r}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be non-negative, got {pad}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {O} output channels")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    # cols: (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N, Ho, Wo, C * kh * kw)
    wmat = kernel.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)
    Hp, Wp = xp.shape[2], xp.shape[3]

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # N, Ho, Wo, O
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gt.reshape(-1, O).T @ cols.reshape(-1, C * kh * kw)).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros((N, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i: i + stride * (Ho - 1) + 1: stride, j: j + stride * (Wo - 1) + 1: stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad: pad + H, pad: pad + W] if pad else gxp
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out, parents, "conv2d", backward)


# ---------------------------------------------------------------------- Adam

class AdamState:
    """Moment buffers and hyper-parameters for a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def state_arrays(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_arrays(self, arrays: dict, step_count: int) -> None:
        for i in range(len(self.params)):
            m, v = arrays[f"m.{i}"], arrays[f"v.{i}"]
            if m.shape != self.params[i].shape or v.shape != self.params[i].shape:
                raise ShapeError(f"optimizer moment {i} shape {m.shape} != parameter {self.params[i].shape}")
            self.m[i] = m.copy()
            self.v[i] = v.copy()
        self.step_count = int(step_count)


def adam_step(state: AdamState, grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
    """One bias-corrected Adam update of ``state.params`` in place of their data arrays.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts as zero.
    """
    if grads is None:
        grads = [p.grad for p in state.params]
    if len(grads) != len(state.params):
        raise ShapeError("number of gradients does not match number of parameters")
    for p, g in zip(state.params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {p.name or repr(p)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(state.params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {p.name}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
