"""Dense NCHW tensors with tape-based reverse-mode automatic differentiation.

The operator set is exactly what the reconstruction network and its training
objective need: 2-D convolution (stride 1, zero "same" padding, arbitrary
dilation), pointwise nonlinearities, elementwise arithmetic, channel
concatenation, logs/exps for range compression and full reductions.

float32 is the working precision for training and inference. Every operator
also runs in float64 so analytic gradients can be checked against central
finite differences; mixed-precision expressions promote to float64 and stay
there.

Gradients accumulate: a tensor consumed by several operators receives the sum
of the incoming adjoints. Calling :func:`backward` twice without clearing
gradients therefore doubles them; the optimizer clears parameter gradients
after each step.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array plus, optionally, a gradient and a backward rule.

    ``requires_grad`` marks leaves the caller wants differentiated; interior
    nodes inherit it from their parents. ``grad`` stays ``None`` until
    :func:`backward` reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """A view of the same data with no tape history."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class Parameter:
    """A named learnable tensor.

    Gradients land on ``value.grad`` during :func:`backward`; ``grad`` reads
    as zeros until then, so unreached parameters look like they received a
    zero gradient.
    """

    __slots__ = ("value", "name")

    def __init__(self, value, name: str):
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.requires_grad = True
        self.value = tensor
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _from_op(data: np.ndarray, parents: Sequence[Tensor],
             backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"adjoint shape {g.shape} does not match tensor shape {t.data.shape}")
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(scalar_loss: Tensor) -> None:
    """Reverse sweep from a single-element loss tensor.

    Seeds the loss gradient with one, topologically orders the tape and
    accumulates adjoints into every tensor with ``requires_grad``.
    """
    if scalar_loss.data.size != 1:
        raise ContractError(
            f"backward needs a single-element loss, got shape {scalar_loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(scalar_loss, False)]
    while stack:
        node, children_done = stack.pop()
        if children_done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    scalar_loss.grad = np.ones_like(scalar_loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unwrap(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    raise ContractError(f"expected Tensor or Parameter, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# pointwise operators

# Central differences are only trustworthy when no perturbation can cross a
# kink, so the finite-difference checker needs to know how close the forward
# pass came to one. When set to a list, the nonsmooth ops below append the
# smallest |input| they see; it stays None outside that audit.
#
# An input sitting bit-exactly on |x|'s kink is recorded as safe
# (ignore_exact_zero): the function is even there, so the central difference
# cancels to zero and agrees with the sign(0) = 0 convention. relu's kink is
# one-sided, so an exact zero is the worst case and must be recorded.
_KINK_TRACE: list[float] | None = None


def _note_kink_distance(arr: np.ndarray, ignore_exact_zero: bool = False) -> None:
    if _KINK_TRACE is None or not arr.size:
        return
    a = np.abs(arr)
    if ignore_exact_zero:
        a = a[a != 0.0]
        if not a.size:
            return
    _KINK_TRACE.append(float(a.min()))


def relu(x: Tensor) -> Tensor:
    x = _unwrap(x)
    _note_kink_distance(x.data)
    out = np.maximum(x.data, 0)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0))

    return _from_op(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    x = _unwrap(x)
    out = np.tanh(x.data)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * (1.0 - out * out))

    return _from_op(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    """Natural logarithm; the input must be strictly positive."""
    x = _unwrap(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    out = np.log(x.data)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g / x.data)

    return _from_op(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    x = _unwrap(x)
    out = np.exp(x.data)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * out)

    return _from_op(out, (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at the kink."""
    x = _unwrap(x)
    _note_kink_distance(x.data, ignore_exact_zero=True)
    out = np.abs(x.data)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * np.sign(x.data))

    return _from_op(out, (x,), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    x = _unwrap(x)
    s = float(s)
    out = x.data * s

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * s)

    return _from_op(out, (x,), bwd)


def add_scalar(x: Tensor, s: float) -> Tensor:
    x = _unwrap(x)
    s = float(s)
    out = x.data + s

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g)

    return _from_op(out, (x,), bwd)


def div_scalar(x: Tensor, s: float) -> Tensor:
    """x / s as a true division (not multiply-by-reciprocal), so x/x-style
    normalizations are exact."""
    x = _unwrap(x)
    s = float(s)
    if s == 0.0:
        raise DomainError("division by zero")
    out = x.data / s

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g / s)

    return _from_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# elementwise binary operators (strict shapes: no broadcasting)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add needs matching shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _from_op(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub needs matching shapes, got {a.shape} and {b.shape}")
    out = a.data - b.data

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _from_op(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul needs matching shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _from_op(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape operators


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    a, b = _unwrap(a), _unwrap(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(
            f"concat_channels needs NCHW tensors, got ndim {a.data.ndim} and {b.data.ndim}")
    sa, sb = a.data.shape, b.data.shape
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"concat_channels needs matching N,H,W, got {sa} and {sb}")
    ca = sa[1]
    out = np.concatenate((a.data, b.data), axis=1)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _from_op(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions


def mean(x: Tensor) -> Tensor:
    x = _unwrap(x)
    if x.data.size == 0:
        raise ShapeError("mean of an empty tensor")
    out = np.asarray(np.mean(x.data))

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, np.ones_like(x.data) * (g / x.data.size))

    return _from_op(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    x = _unwrap(x)
    out = np.asarray(np.sum(x.data))

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, np.ones_like(x.data) * g)

    return _from_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight, bias, *, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """2-D convolution, stride 1, zero "same" padding, square dilation.

    ``x`` is NCHW; ``weight`` is (C_out, C_in, kH, kW); ``bias`` is (C_out,).
    Output spatial size equals input spatial size for any kernel size and
    dilation (asymmetric total padding puts the extra zero on the
    bottom/right edge). ``weight`` and ``bias`` may be Parameters or plain
    Tensors, so the same kernel serves the trainable network and the frozen
    feature extractor.
    """
    x, w, b = _unwrap(x), _unwrap(weight), _unwrap(bias)
    if not isinstance(dilation, int) or dilation < 1:
        raise ConfigError(f"dilation must be a positive integer, got {dilation!r}")
    if padding != "same":
        raise ConfigError(f"only 'same' padding is supported, got {padding!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d, got shape {w.shape}")
    n, c_in, h, wd = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"input has {c_in} channels but weight expects {c_in_w} (weight shape {w.shape})")
    if b.data.shape != (c_out,):
        raise ShapeError(f"bias shape {b.shape} does not match {c_out} output channels")

    out_dtype = np.result_type(x.data, w.data, b.data)

    if kh == 1 and kw == 1:
        xp = x.data
        pt = pl = 0
    else:
        th, tw = dilation * (kh - 1), dilation * (kw - 1)
        pt, pl = th // 2, tw // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, th - pt), (pl, tw - pl)))

    # One tensordot per kernel tap keeps memory flat and the accumulation
    # order fixed, so repeated runs are bit-identical.
    acc = np.zeros((n, h, wd, c_out), dtype=out_dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i * dilation:i * dilation + h, j * dilation:j * dilation + wd]
            acc += np.tensordot(xs, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 3, 1)) + b.data[None, :, None, None]

    def bwd(g: np.ndarray) -> None:
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        gl = np.moveaxis(g, 1, 3)  # N,H,W,C_out
        if w.requires_grad:
            wg = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i * dilation:i * dilation + h,
                            j * dilation:j * dilation + wd]
                    wg[:, :, i, j] = np.tensordot(gl, xs, axes=([0, 1, 2], [0, 2, 3]))
            _accumulate(w, wg)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=gl.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(gl, w.data[:, :, i, j], axes=([3], [0]))
                    gxp[:, :, i * dilation:i * dilation + h,
                        j * dilation:j * dilation + wd] += np.moveaxis(contrib, 3, 1)
            if pt or pl or gxp.shape != x.data.shape:
                gx = gxp[:, :, pt:pt + h, pl:pl + wd]
            else:
                gx = gxp
            _accumulate(x, gx)

    return _from_op(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[], float], p: Parameter, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``f`` with respect to ``p``.

    ``f`` takes no arguments and must re-evaluate the quantity of interest
    from the parameter's current contents; each element of ``p`` is perturbed
    in place by +/- eps and restored. Returns a float64 array shaped like
    ``p``. Quadratic cost in parameter count: this is a verification oracle,
    not a training path.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    data = p.value.data
    flat = data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f())
        flat[i] = orig - eps
        f_minus = float(f())
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(data.shape)


def relative_gradient_error(analytic: np.ndarray, fd: np.ndarray,
                            floor: float = 1e-8) -> float:
    """Worst elementwise |a - f| / max(|a|, |f|, floor) between two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(fd, dtype=np.float64)
    if a.shape != f.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {f.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
