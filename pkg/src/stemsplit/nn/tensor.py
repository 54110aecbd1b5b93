"""Dense tensors with reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor in the graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b):
    # plain constants adopt the tensor operand's dtype
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    a, b = as_tensor(a), as_tensor(b)
    dtype = np.result_type(a.dtype, b.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b, dtype


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    idx = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward)


slice_ = getitem


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    return _result(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


def mean_over(tensors: Sequence) -> Tensor:
    """Elementwise mean of equally shaped tensors (parameter-free averaging bridge)."""
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"mean_over: shapes {ts[0].shape} and {t.shape} differ")
    k = len(ts)
    out = ts[0].data.copy()
    for t in ts[1:]:
        out = out + t.data
    return _result(out / k, ts, lambda g: tuple(g / k for _ in ts))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``(out, in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out.reshape(lead + (weight.shape[0],)), parents, backward)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalization over every axis but the last.

    In training mode the running statistics are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batchnorm: features {d} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.data.size // d
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            m = x.data.size // d
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# recurrent
# --------------------------------------------------------------------------


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One LSTM step with gate order (input, forget, cell, output).

    Built from primitive ops; returns ``(h_next, c_next)``.
    """
    hidden = as_tensor(h).shape[-1]
    gates = linear(x, w_ih, b) + linear(h, w_hh)
    i = sigmoid(gates[..., 0:hidden])
    f = sigmoid(gates[..., hidden : 2 * hidden])
    g = tanh(gates[..., 2 * hidden : 3 * hidden])
    o = sigmoid(gates[..., 3 * hidden : 4 * hidden])
    c_next = f * c + i * g
    return o * tanh(c_next), c_next


def bilstm_group(x, w_ih, w_hh, b) -> Tensor:
    """Bidirectional LSTM layers for ``G`` independent stacks in one pass.

    Shapes: ``x (G, B, T, D)``, ``w_ih (G, 2, 4H, D)``, ``w_hh (G, 2, 4H, H)``,
    ``b (G, 2, 4H)``; direction 0 runs forward in time, 1 backward. Returns
    ``(G, B, T, 2H)`` with forward states first. Zero initial state.
    """
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    G, B, T, D = x.shape
    H = w_hh.shape[-1]
    if w_ih.shape != (G, 2, 4 * H, D) or w_hh.shape != (G, 2, 4 * H, H) or b.shape != (G, 2, 4 * H):
        raise ShapeError(
            f"bilstm_group: x {x.shape} incompatible with w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}"
        )
    dtype = x.dtype
    # input projections for both directions: (G, 2, B, T, 4H)
    proj = (x.data.reshape(G, 1, B * T, D) @ np.swapaxes(w_ih.data, -1, -2)).reshape(G, 2, B, T, 4 * H)
    proj += b.data[:, :, None, None, :]
    proj[:, 1] = proj[:, 1, :, ::-1]
    w_hh_t = np.swapaxes(w_hh.data, -1, -2)

    acts = np.empty((T, G, 2, B, 4 * H), dtype=dtype)  # i, f, g, o after nonlinearity
    cs = np.empty((T + 1, G, 2, B, H), dtype=dtype)
    hs = np.empty((T + 1, G, 2, B, H), dtype=dtype)
    tcs = np.empty((T, G, 2, B, H), dtype=dtype)
    cs[0] = 0
    hs[0] = 0
    for t in range(T):
        z = proj[:, :, :, t] + hs[t] @ w_hh_t
        a = acts[t]
        a[..., : 2 * H] = _sigmoid(z[..., : 2 * H])
        a[..., 2 * H : 3 * H] = np.tanh(z[..., 2 * H : 3 * H])
        a[..., 3 * H :] = _sigmoid(z[..., 3 * H :])
        cs[t + 1] = a[..., H : 2 * H] * cs[t] + a[..., :H] * a[..., 2 * H : 3 * H]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = a[..., 3 * H :] * tcs[t]

    fwd = hs[1:, :, 0].transpose(1, 2, 0, 3)  # (G, B, T, H)
    bwd = hs[1:, :, 1][::-1].transpose(1, 2, 0, 3)
    out = np.concatenate([fwd, bwd], axis=-1)

    def backward(gout):
        dh_seq = np.empty((T, G, 2, B, H), dtype=dtype)
        dh_seq[:, :, 0] = gout[..., :H].transpose(2, 0, 1, 3)
        dh_seq[:, :, 1] = gout[..., H:].transpose(2, 0, 1, 3)[::-1]
        dz_all = np.empty((T, G, 2, B, 4 * H), dtype=dtype)
        dh_next = np.zeros((G, 2, B, H), dtype=dtype)
        dc_next = np.zeros((G, 2, B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            a = acts[t]
            i, f, g, o = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
            dh = dh_seq[t] + dh_next
            tc = tcs[t]
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[..., :H] = dc * g * i * (1 - i)
            dz[..., H : 2 * H] = dc * cs[t] * f * (1 - f)
            dz[..., 2 * H : 3 * H] = dc * i * (1 - g * g)
            dz[..., 3 * H :] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dz @ w_hh.data
        # (G, 2, 4H, H): sum over time and batch of dz^T h_prev
        dz_k = dz_all.transpose(1, 2, 4, 0, 3).reshape(G, 2, 4 * H, T * B)
        h_prev = hs[:-1].transpose(1, 2, 0, 3, 4).reshape(G, 2, T * B, H)
        d_w_hh = dz_k @ h_prev
        # back to input-time order for the projection gradients
        dproj = dz_all.transpose(1, 2, 3, 0, 4).copy()  # (G, 2, B, T, 4H)
        dproj[:, 1] = dproj[:, 1, :, ::-1]
        d_b = dproj.sum(axis=(2, 3))
        dproj2 = dproj.reshape(G, 2, B * T, 4 * H)
        x2 = x.data.reshape(G, 1, B * T, D)
        d_w_ih = np.swapaxes(dproj2, -1, -2) @ x2
        dx = (dproj2 @ w_ih.data).sum(axis=1).reshape(G, B, T, D)
        return dx, d_w_ih, d_w_hh, d_b

    return _result(out, (x, w_ih, w_hh, b), backward)


def bilstm_layer(x, w_ih, w_hh, b) -> Tensor:
    """Single-stack bidirectional LSTM on ``x (B, T, D)``; weights carry the direction axis first."""
    x = as_tensor(x)
    out = bilstm_group(
        reshape(x, (1,) + x.shape),
        reshape(w_ih, (1,) + as_tensor(w_ih).shape),
        reshape(w_hh, (1,) + as_tensor(w_hh).shape),
        reshape(b, (1,) + as_tensor(b).shape),
    )
    return reshape(out, out.shape[1:])
