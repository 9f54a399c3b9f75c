"""Minimal dense-tensor kernel with reverse-mode autodiff and Adam.

Everything is 64-bit; the model widths here are tiny, so precision is cheap
and finite-difference gradient checks stay clean.  Ops record themselves on
a module-level tape in forward order; ``backward`` replays the tape in exact
reverse order and then clears it.  A tape and its tensors belong to one
worker; run independent tapes per worker for data-parallel gradients.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_leaf")

    def __init__(self, data, requires_grad=False, _leaf=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._leaf = _leaf
        # leaves get their buffer up front; op outputs allocate lazily on
        # first accumulation (they are written exactly once per backward)
        self.grad = np.zeros_like(self.data) if (self.requires_grad and _leaf) else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self._leaf:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad[...] = 0.0
        else:
            self.grad = None

    def accumulate(self, g):
        # First write takes ownership of ``g``: backward closures only pass
        # freshly computed arrays or views of buffers that are never read
        # again (reverse-order replay guarantees a tensor's grad is final
        # before its own rule runs).  Leaves keep their eager buffer and are
        # therefore never aliased.
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE: list = []
_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference mode)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def tape_size() -> int:
    return len(_TAPE)


def clear_tape():
    _TAPE.clear()


def _record(out: Tensor, backward_fn):
    if _RECORDING and out.requires_grad:
        _TAPE.append((out, backward_fn))


def _needs(*tensors) -> bool:
    return _RECORDING and any(t.requires_grad for t in tensors)


def backward(loss: Tensor, seed: float = 1.0):
    """Populate gradients of every requires_grad tensor; clears the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        clear_tape()
        return
    loss.accumulate(np.full_like(loss.data, seed))
    for out, fn in reversed(_TAPE):
        if out.grad is not None:
            fn(out.grad)
    clear_tape()


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting).

    The same-shape case copies: pass-through rules must never hand one buffer
    to two tensors, because some backward rules update dead buffers in place.
    """
    if grad.shape == shape:
        return grad.copy()
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _out(data, needs: bool) -> Tensor:
    return Tensor(data, requires_grad=needs, _leaf=False)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = _out(a.data @ b.data, _needs(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    _record(out, bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError("transpose expects a 2-D tensor")
    out = _out(a.data.T, _needs(a))
    _record(out, lambda g: a.accumulate(g.T))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ContractError(f"add shapes {a.data.shape} + {b.data.shape}") from None
    out = _out(data, _needs(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    _record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ContractError(f"sub shapes {a.data.shape} - {b.data.shape}") from None
    out = _out(data, _needs(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ContractError(f"mul shapes {a.data.shape} * {b.data.shape}") from None
    out = _out(data, _needs(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    _record(out, bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _out(a.data * s, _needs(a))
    _record(out, lambda g: a.accumulate(g * s))
    return out


def add_const(a: Tensor, c) -> Tensor:
    out = _out(a.data + c, _needs(a))
    _record(out, lambda g: a.accumulate(_unbroadcast(g, a.data.shape)))
    return out


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    out = _out(a.data * c, _needs(a))
    _record(out, lambda g: a.accumulate(_unbroadcast(g * c, a.data.shape)))
    return out


def concat_last_dim(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat_last_dim needs at least one tensor")
    lead = tensors[0].data.shape[:-1]
    for t in tensors:
        if t.data.shape[:-1] != lead:
            raise ContractError(
                f"concat leading dims differ: {[t.data.shape for t in tensors]}"
            )
    out = _out(np.concatenate([t.data for t in tensors], axis=-1),
                 _needs(*tensors))
    widths = [t.data.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=-1)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(part)

    _record(out, bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _needs(a))
    _record(out, lambda g: a.accumulate(g.reshape(a.data.shape)))
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    # x.data is consumed in place when x is an op output: no later rule needs
    # the raw scores, and reusing the buffer halves memory traffic on the
    # R x R attention matrices.
    if x._leaf:
        s = x.data - x.data.max(axis=-1, keepdims=True)
    else:
        s = x.data
        s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = _out(s, _needs(x))

    def bwd(g):
        # g is this op's own output gradient: dead after this rule, safe to
        # update in place.
        dot = np.einsum("...i,...i->...", g, s)[..., None]
        g -= dot
        g *= s
        x.accumulate(g)

    _record(out, bwd)
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = _out(y * gain.data + bias.data, _needs(x, gain, bias))

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * y, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dy = g * gain.data
            term = dy - dy.mean(axis=-1, keepdims=True) \
                - y * (dy * y).mean(axis=-1, keepdims=True)
            x.accumulate(term * inv)

    _record(out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.data, 0.0), _needs(x))

    def bwd(g):
        g *= x.data > 0   # g is dead after this rule
        x.accumulate(g)

    _record(out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = _out(s, _needs(x))
    _record(out, lambda g: x.accumulate(g * s * (1.0 - s)))
    return out


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: eval mode is the identity, no rescaling at inference."""
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an RNG")
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)
    out = _out(x.data * factor, _needs(x))
    _record(out, lambda g: x.accumulate(g * factor))
    return out


def power(x: Tensor, p: float) -> Tensor:
    out = _out(x.data ** p, _needs(x))
    _record(out, lambda g: x.accumulate(g * p * x.data ** (p - 1)))
    return out


def absolute(x: Tensor) -> Tensor:
    out = _out(np.abs(x.data), _needs(x))
    _record(out, lambda g: x.accumulate(g * np.sign(x.data)))
    return out


def max_lastdim(x: Tensor) -> Tensor:
    """Row-wise max, keepdims; subgradient flows to the first argmax."""
    idx = x.data.argmax(axis=-1)
    out = _out(np.take_along_axis(x.data, idx[..., None], axis=-1), _needs(x))

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g, axis=-1)
        x.accumulate(gx)

    _record(out, bwd)
    return out


def sum_lastdim(x: Tensor) -> Tensor:
    out = _out(x.data.sum(axis=-1, keepdims=True), _needs(x))
    _record(out, lambda g: x.accumulate(np.broadcast_to(g, x.data.shape).copy()))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.array(x.data.sum()), _needs(x))
    _record(out, lambda g: x.accumulate(np.broadcast_to(g, x.data.shape).copy()))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _out(np.array(x.data.mean()), _needs(x))
    _record(out, lambda g: x.accumulate(np.broadcast_to(g / n, x.data.shape).copy()))
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tdata.shape:
        raise ContractError(f"mse shapes {pred.data.shape} vs {tdata.shape}")
    diff = pred.data - tdata
    out = _out(np.array(np.mean(diff ** 2)), _needs(pred))
    n = diff.size
    _record(out, lambda g: pred.accumulate(g * 2.0 * diff / n))
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a name->Tensor parameter mapping."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
