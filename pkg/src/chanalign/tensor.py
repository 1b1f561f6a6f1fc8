"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a local backward rule on the
produced tensor; ``Tensor.backward`` walks the recorded graph once in
reverse topological order and accumulates gradients additively at
fan-out points. Double precision is the default; float32 is accepted
for training runs that ask for it.

Broadcasting is deliberately limited to scalar-vs-tensor; anything
fancier raises ``ShapeMismatchError``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ParameterError, ShapeMismatchError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops new operations from being recorded."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A numeric array plus an optional slot in the autodiff graph.

    ``grad`` stays ``None`` until ``backward`` reaches this tensor, and a
    tensor built with ``requires_grad=False`` never accumulates one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- graph plumbing ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        else:
            out._parents = ()
            out._backward = None
            out._op = op
        return out

    def _accumulate(self, g):
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Populate ``grad`` on every reachable ``requires_grad`` tensor.

        The receiver must be a scalar; the seed gradient is 1.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            child = next(it, None)
            if child is None:
                topo.append(node)
                stack.pop()
            elif id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._parents)))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- conveniences ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- pointwise arithmetic --------------------------------------------

    def _check_same_shape(self, other, op):
        if self.data.shape != other.data.shape:
            raise ShapeMismatchError(
                f"{op}: shapes {self.data.shape} and {other.data.shape} differ"
            )

    def __add__(self, other):
        if isinstance(other, Tensor):
            if other.data.size == 1 and self.data.size != 1:
                return _add_scalar_tensor(self, other)
            if self.data.size == 1 and other.data.size != 1:
                return _add_scalar_tensor(other, self)
            self._check_same_shape(other, "add")
            out_data = self.data + other.data

            def backward(a=self, b=other):
                g = out.grad
                a._accumulate(g)
                b._accumulate(g)

            out = Tensor._result(out_data, (self, other), backward, "add")
            return out
        return _add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (other * -1.0)
        return _add_const(self, -float(other))

    def __rsub__(self, other):
        return (self * -1.0) + float(other)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.data.size == 1 and self.data.size != 1:
                return _mul_scalar_tensor(self, other)
            if self.data.size == 1 and other.data.size != 1:
                return _mul_scalar_tensor(other, self)
            self._check_same_shape(other, "mul")
            out_data = self.data * other.data

            def backward(a=self, b=other):
                g = out.grad
                a._accumulate(g * b.data)
                b._accumulate(g * a.data)

            out = Tensor._result(out_data, (self, other), backward, "mul")
            return out
        return _scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeMismatchError("tensor/tensor division is not supported")
        return _scale(self, 1.0 / float(other))

    # -- pointwise nonlinearities ----------------------------------------

    def relu(self):
        mask = self.data > 0

        def backward(a=self):
            a._accumulate(out.grad * mask)

        out = Tensor._result(np.where(mask, self.data, 0.0), (self,), backward, "relu")
        return out

    def sigmoid(self):
        x = self.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)

        def backward(a=self):
            a._accumulate(out.grad * s * (1.0 - s))

        out = Tensor._result(s, (self,), backward, "sigmoid")
        return out

    def log(self):
        def backward(a=self):
            a._accumulate(out.grad / a.data)

        out = Tensor._result(np.log(self.data), (self,), backward, "log")
        return out

    def exp(self):
        e = np.exp(self.data)

        def backward(a=self):
            a._accumulate(out.grad * e)

        out = Tensor._result(e, (self,), backward, "exp")
        return out

    def square(self):
        def backward(a=self):
            a._accumulate(out.grad * (2.0 * a.data))

        out = Tensor._result(self.data * self.data, (self,), backward, "square")
        return out

    def clamp(self, lo, hi):
        """Clip values to [lo, hi]; gradient passes only inside the range."""
        inside = (self.data > lo) & (self.data < hi)

        def backward(a=self):
            a._accumulate(out.grad * inside)

        out = Tensor._result(np.clip(self.data, lo, hi), (self,), backward, "clamp")
        return out

    # -- reductions and reshapes ------------------------------------------

    def sum(self):
        def backward(a=self):
            a._accumulate(np.full_like(a.data, float(out.grad)))

        out = Tensor._result(np.asarray(self.data.sum()), (self,), backward, "sum")
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def backward(a=self):
            a._accumulate(out.grad.reshape(old))

        out = Tensor._result(self.data.reshape(shape), (self,), backward, "reshape")
        return out

    def t(self):
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"t(): expected a matrix, got shape {self.data.shape}")

        def backward(a=self):
            a._accumulate(out.grad.T)

        out = Tensor._result(self.data.T.copy(), (self,), backward, "transpose")
        return out

    def matmul(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeMismatchError(
                f"matmul: expected matrices, got shapes {a.shape} and {b.shape}"
            )
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(
                f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}"
            )

        def backward(x=self, y=other):
            g = out.grad
            x._accumulate(g @ y.data.T)
            y._accumulate(x.data.T @ g)

        out = Tensor._result(a @ b, (self, other), backward, "matmul")
        return out

    __matmul__ = matmul


def _add_const(t, c):
    def backward(a=t):
        a._accumulate(out.grad)

    out = Tensor._result(t.data + c, (t,), backward, "add_const")
    return out


def _scale(t, c):
    def backward(a=t):
        a._accumulate(out.grad * c)

    out = Tensor._result(t.data * c, (t,), backward, "scale")
    return out


def _add_scalar_tensor(t, s):
    # t is a full tensor, s holds a single element broadcast over it
    def backward(a=t, b=s):
        g = out.grad
        a._accumulate(g)
        b._accumulate(np.asarray(g.sum()).reshape(b.data.shape))

    out = Tensor._result(t.data + s.data.reshape(-1)[0], (t, s), backward, "add")
    return out


def _mul_scalar_tensor(t, s):
    sval = s.data.reshape(-1)[0]

    def backward(a=t, b=s):
        g = out.grad
        a._accumulate(g * sval)
        b._accumulate(np.asarray((g * a.data).sum()).reshape(b.data.shape))

    out = Tensor._result(t.data * sval, (t, s), backward, "mul")
    return out


# -- structured operations ------------------------------------------------


def conv2d(x, weight, bias=None):
    """3x3 cross-correlation with stride 1 and zero padding 1.

    x: (Cin, H, W); weight: (Cout, Cin, 3, 3); bias: optional (Cout,).
    Output spatial shape equals the input's.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 3:
        raise ShapeMismatchError(f"conv2d: input must be (C, H, W), got {xd.shape}")
    if wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ShapeMismatchError(f"conv2d: kernel must be (Cout, Cin, 3, 3), got {wd.shape}")
    cin, h, w = xd.shape
    cout = wd.shape[0]
    if wd.shape[1] != cin:
        raise ShapeMismatchError(
            f"conv2d: input has {cin} channels but kernel expects {wd.shape[1]} "
            f"(input {xd.shape}, kernel {wd.shape})"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels"
        )

    xp = np.zeros((cin, h + 2, w + 2), dtype=xd.dtype)
    xp[:, 1 : h + 1, 1 : w + 1] = xd
    hw = h * w
    cols = [
        xp[:, di : di + h, dj : dj + w].reshape(cin, hw)
        for di in range(3)
        for dj in range(3)
    ]
    out_flat = np.zeros((cout, hw), dtype=xd.dtype)
    kflat = wd.reshape(cout, cin, 9)
    for k in range(9):
        out_flat += kflat[:, :, k] @ cols[k]
    out_data = out_flat.reshape(cout, h, w)
    if bias is not None:
        out_data = out_data + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad
        gflat = g.reshape(cout, hw)
        if bias is not None:
            bias._accumulate(g.sum(axis=(1, 2)))
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for k in range(9):
                gw[:, :, k // 3, k % 3] = gflat @ cols[k].T
            weight._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(9):
                di, dj = k // 3, k % 3
                gxp[:, di : di + h, dj : dj + w] += (
                    kflat[:, :, k].T @ gflat
                ).reshape(cin, h, w)
            x._accumulate(gxp[:, 1 : h + 1, 1 : w + 1])

    out = Tensor._result(out_data, parents, backward, "conv2d")
    return out


def max_pool2(x):
    """2x2 max pooling with stride 2; gradient goes to the first max
    in row-major window order on ties."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatchError(f"max_pool2: input must be (C, H, W), got {xd.shape}")
    c, h, w = xd.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError(f"max_pool2: spatial size ({h}, {w}) is below 2x2")
    ho, wo = h // 2, w // 2
    windows = (
        xd[:, : 2 * ho, : 2 * wo]
        .reshape(c, ho, 2, wo, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, ho, wo, 4)
    )
    idx = windows.argmax(axis=3)
    out_data = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]

    def backward():
        g = out.grad
        gw = np.zeros((c, ho, wo, 4), dtype=xd.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=3)
        gx = np.zeros_like(xd)
        gx[:, : 2 * ho, : 2 * wo] = (
            gw.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        )
        x._accumulate(gx)

    out = Tensor._result(out_data, (x,), backward, "max_pool2")
    return out


def global_avg_pool(x):
    """Mean over all spatial positions per channel: (C, H, W) -> (C, 1)."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatchError(f"global_avg_pool: input must be (C, H, W), got {xd.shape}")
    c, h, w = xd.shape
    out_data = xd.reshape(c, h * w).mean(axis=1, keepdims=True)

    def backward():
        x._accumulate(np.broadcast_to(out.grad / (h * w), (c, h * w)).reshape(c, h, w))

    out = Tensor._result(out_data, (x,), backward, "global_avg_pool")
    return out


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over the spatial positions of one sample.

    Train mode normalizes with the sample's own (biased) moments and
    updates the running buffers in place; eval mode normalizes with the
    running buffers. gamma/beta are (C,) tensors.
    """
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatchError(f"batch_norm: input must be (C, H, W), got {xd.shape}")
    c, h, w = xd.shape
    m = h * w
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError(
            f"batch_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels"
        )
    if training:
        if m < 2:
            raise ContractError(
                "batch_norm: train mode needs at least 2 spatial positions per channel"
            )
        mu = xd.mean(axis=(1, 2))
        var = xd.var(axis=(1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * inv_std[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward():
        g = out.grad
        beta._accumulate(g.sum(axis=(1, 2)))
        gamma._accumulate((g * xhat).sum(axis=(1, 2)))
        if x.requires_grad:
            gx_hat = g * gamma.data[:, None, None]
            if training:
                mean_g = gx_hat.mean(axis=(1, 2), keepdims=True)
                mean_gx = (gx_hat * xhat).mean(axis=(1, 2), keepdims=True)
                gx = inv_std[:, None, None] * (gx_hat - mean_g - xhat * mean_gx)
            else:
                gx = gx_hat * inv_std[:, None, None]
            x._accumulate(gx)

    out = Tensor._result(out_data, (x, gamma, beta), backward, "batch_norm")
    return out


def grl(x, lam):
    """Gradient reversal: identity forward, -lam * grad backward."""
    lam = float(lam)
    if lam < 0:
        raise ParameterError(f"grl: lambda must be nonnegative, got {lam}")

    def backward():
        x._accumulate(out.grad * (-lam))

    out = Tensor._result(x.data.copy(), (x,), backward, "grl")
    out._grl_lambda = lam if False else lam  # kept on closure; attribute not needed
    return out
