"""Minimal reverse-mode automatic differentiation on float32 numpy buffers.

The engine is deliberately small: a `Tensor` wraps a float32 array plus a
lazily allocated gradient buffer, a `Tape` records executed operations, and
`backward` replays the tape in exact reverse order. Ops cover what a small
convolutional classifier needs (conv2d, linear, relu, pooling, elementwise
add/mul with broadcasting, flatten, softmax cross-entropy) plus SGD/Adam
steps and a cosine learning-rate schedule.

Everything is single precision and single threaded: one tape per training
context, no recording during evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "as_tensor",
    "active_tape",
    "record_op",
    "op_forward",
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "add",
    "mul",
    "flatten",
    "softmax_cross_entropy",
    "backward",
    "OptimizerState",
    "make_optimizer",
    "make_sgd",
    "make_adam",
    "optimizer_step",
    "zero_grads",
    "cosine_lr",
]

DTYPE = np.float32


class TensorError(ValueError):
    """Shape or usage error raised by tensor ops."""


class Tensor:
    """Dense float32 array participating in reverse-mode differentiation."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=DTYPE)
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def ensure_grad(self) -> np.ndarray:
        if not self.requires_grad:
            raise TensorError("grad requested on a tensor with requires_grad=False")
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        t = Tensor(self.values.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape


@dataclass
class _Node:
    output: Tensor
    # (input tensor, function mapping upstream grad -> grad contribution)
    inputs: Sequence[tuple]


class Tape:
    """Ordered record of executed ops, replayed backward in reverse order."""

    _stack: list = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._stack.pop()

    def clear(self) -> None:
        self.nodes.clear()
        self.consumed = True


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def record_op(output: Tensor, input_grads: Sequence[tuple]) -> None:
    """Record an op on the active tape if any input requires grad.

    `input_grads` pairs each differentiable input tensor with a callable
    that maps the upstream gradient to that input's gradient contribution.
    Inputs with requires_grad=False must not be listed.
    """
    tape = active_tape()
    relevant = [(t, fn) for (t, fn) in input_grads if t.requires_grad]
    if relevant:
        output.requires_grad = True
        if tape is not None:
            tape.nodes.append(_Node(output=output, inputs=relevant))


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into the grad buffer of every requires_grad leaf.

    Repeated calls on a live tape accumulate; a cleared tape raises.
    """
    if tape.consumed:
        raise TensorError("backward on a consumed tape")
    if loss.values.size != 1:
        raise TensorError(f"loss must be scalar, got shape {loss.values.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if tape.nodes and id(loss) not in produced and loss.requires_grad:
        raise TensorError("loss was not produced under this tape")
    # per-pass flow buffers for intermediates; only leaves persist into .grad
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = flow.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, fn in node.inputs:
            contrib = fn(g)
            if id(tensor) in produced:
                buf = flow.get(id(tensor))
                if buf is None:
                    flow[id(tensor)] = contrib.astype(DTYPE, copy=True)
                else:
                    buf += contrib
            else:
                tensor.ensure_grad()
                tensor.grad += contrib


# --------------------------------------------------------------------------
# Ops


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(DTYPE, copy=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values + b.values)
    record_op(out, [
        (a, lambda g, sh=a.shape: _unbroadcast(g, sh)),
        (b, lambda g, sh=b.shape: _unbroadcast(g, sh)),
    ])
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values * b.values)
    record_op(out, [
        (a, lambda g, bv=b.values, sh=a.shape: _unbroadcast(g * bv, sh)),
        (b, lambda g, av=a.values, sh=b.shape: _unbroadcast(g * av, sh)),
    ])
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.values, 0.0))
    mask = x.values > 0
    record_op(out, [(x, lambda g: g * mask)])
    return out


def flatten(x: Tensor) -> Tensor:
    n = x.values.shape[0]
    out = Tensor(x.values.reshape(n, -1))
    record_op(out, [(x, lambda g, sh=x.values.shape: g.reshape(sh))])
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.values.ndim != 2 or w.values.ndim != 2 or x.values.shape[1] != w.values.shape[1]:
        raise TensorError(
            f"linear: input {x.values.shape} incompatible with weight {w.values.shape}"
        )
    y = x.values @ w.values.T
    if b is not None:
        if b.values.shape != (w.values.shape[0],):
            raise TensorError(f"linear: bias shape {b.values.shape} != ({w.values.shape[0]},)")
        y = y + b.values
    out = Tensor(y)
    grads = [
        (x, lambda g, wv=w.values: g @ wv),
        (w, lambda g, xv=x.values: g.T @ xv),
    ]
    if b is not None:
        grads.append((b, lambda g: g.sum(axis=0)))
    record_op(out, grads)
    return out


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols


def _col2im(cols: np.ndarray, xp_shape: tuple, k: int, stride: int) -> np.ndarray:
    ho, wo = cols.shape[4], cols.shape[5]
    out = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, NCHW input against OIHW kernel."""
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise TensorError(
            f"conv2d: expected 4D input and kernel, got {x.values.shape} and {w.values.shape}"
        )
    if stride < 1 or pad < 0:
        raise TensorError(f"conv2d: invalid stride={stride} pad={pad}")
    n, cin, h, wd = x.values.shape
    cout, cin_k, kh, kw = w.values.shape
    if cin != cin_k or kh != kw:
        raise TensorError(
            f"conv2d: kernel {w.values.shape} incompatible with input channels {cin}"
        )
    k = kh
    ho, wo = _conv_out_dim(h, k, stride, pad), _conv_out_dim(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d: output would be empty for input {x.values.shape}, k={k}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.values
    cols = _im2col(xp, k, stride, ho, wo)  # (N, Cin, k, k, Ho, Wo)
    cols2 = cols.reshape(n, cin * k * k, ho * wo)
    wmat = w.values.reshape(cout, cin * k * k)
    y = np.einsum("ok,nkl->nol", wmat, cols2, optimize=True).reshape(n, cout, ho, wo)
    y = np.ascontiguousarray(y, dtype=DTYPE)
    if b is not None:
        if b.values.shape != (cout,):
            raise TensorError(f"conv2d: bias shape {b.values.shape} != ({cout},)")
        y += b.values[None, :, None, None]
    out = Tensor(y)

    def grad_w(g: np.ndarray) -> np.ndarray:
        gm = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nol,nkl->ok", gm, cols2, optimize=True)
        return gw.reshape(w.values.shape)

    def grad_x(g: np.ndarray) -> np.ndarray:
        gm = g.reshape(n, cout, ho * wo)
        gcols = np.einsum("ok,nol->nkl", wmat, gm, optimize=True)
        gcols = gcols.reshape(n, cin, k, k, ho, wo)
        gxp = _col2im(gcols, xp.shape, k, stride)
        if pad:
            return gxp[:, :, pad : pad + h, pad : pad + wd]
        return gxp

    grads = [(x, grad_x), (w, grad_w)]
    if b is not None:
        grads.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    record_op(out, grads)
    return out


def _pool_prep(x: Tensor, k: int, stride: int, name: str):
    if x.values.ndim != 4:
        raise TensorError(f"{name}: expected NCHW input, got {x.values.shape}")
    if k < 1 or stride < 1:
        raise TensorError(f"{name}: invalid k={k} stride={stride}")
    n, c, h, w = x.values.shape
    ho, wo = _conv_out_dim(h, k, stride, 0), _conv_out_dim(w, k, stride, 0)
    if ho < 1 or wo < 1:
        raise TensorError(f"{name}: window {k} too large for input {x.values.shape}")
    windows = _im2col(x.values, k, stride, ho, wo)  # (N, C, k, k, Ho, Wo)
    return n, c, ho, wo, windows.reshape(n, c, k * k, ho, wo)


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, ho, wo, win = _pool_prep(x, k, stride, "maxpool2d")
    idx = win.argmax(axis=2)
    out = Tensor(np.take_along_axis(win, idx[:, :, None], axis=2)[:, :, 0])

    def grad_x(g: np.ndarray) -> np.ndarray:
        gwin = np.zeros((n, c, k * k, ho, wo), dtype=DTYPE)
        np.put_along_axis(gwin, idx[:, :, None], g[:, :, None], axis=2)
        return _col2im(gwin.reshape(n, c, k, k, ho, wo), x.values.shape, k, stride)

    record_op(out, [(x, grad_x)])
    return out


def avgpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, ho, wo, win = _pool_prep(x, k, stride, "avgpool2d")
    out = Tensor(win.mean(axis=2))

    def grad_x(g: np.ndarray) -> np.ndarray:
        gwin = np.broadcast_to(g[:, :, None] / DTYPE(k * k), (n, c, k * k, ho, wo))
        return _col2im(gwin.reshape(n, c, k, k, ho, wo), x.values.shape, k, stride)

    record_op(out, [(x, grad_x)])
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    if logits.values.ndim != 2:
        raise TensorError(f"softmax_cross_entropy: logits must be 2D, got {logits.values.shape}")
    labels = np.asarray(labels)
    n, kcls = logits.values.shape
    if labels.shape != (n,):
        raise TensorError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= kcls:
        raise TensorError("softmax_cross_entropy: label out of range")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = Tensor(-logp[np.arange(n), labels].mean())

    def grad_logits(g: np.ndarray) -> np.ndarray:
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        return (g * p / DTYPE(n)).astype(DTYPE, copy=False)

    record_op(loss, [(logits, grad_logits)])
    return loss


_OPS: dict[str, Callable] = {
    "conv2d": conv2d,
    "linear": linear,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "add": add,
    "mul": mul,
    "flatten": flatten,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def op_forward(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a forward op by name."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise TensorError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# Optimizers and schedule


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    params: list = field(default_factory=list)
    slots: dict = field(default_factory=dict)  # id(param) -> moment buffers


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float, **hp) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise TensorError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, lr=lr, params=list(params), **hp)
    for p in state.params:
        if kind == "sgd":
            state.slots[id(p)] = (np.zeros_like(p.values),)
        else:
            state.slots[id(p)] = (np.zeros_like(p.values), np.zeros_like(p.values))
    return state


def make_sgd(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> OptimizerState:
    return make_optimizer("sgd", params, lr, momentum=momentum, weight_decay=weight_decay)


def make_adam(params: Sequence[Tensor], lr: float, betas: tuple = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> OptimizerState:
    return make_optimizer("adam", params, lr, betas=betas, eps=eps, weight_decay=weight_decay)


def optimizer_step(state: OptimizerState, params: Optional[Sequence[Tensor]] = None) -> None:
    """Apply one update in place. Grads are left untouched; caller zeroes."""
    params = state.params if params is None else params
    state.step_count += 1
    t = state.step_count
    for p in params:
        if id(p) not in state.slots:
            raise TensorError("optimizer_step: parameter not registered with this optimizer")
        if p.grad is None:
            raise TensorError("optimizer_step: registered parameter has no grad")
        g = p.grad
        if state.weight_decay:
            g = g + DTYPE(state.weight_decay) * p.values
        if state.kind == "sgd":
            (buf,) = state.slots[id(p)]
            if state.momentum:
                buf *= DTYPE(state.momentum)
                buf += g
                upd = buf
            else:
                upd = g
            p.values -= DTYPE(state.lr) * upd
        else:
            m, v = state.slots[id(p)]
            b1, b2 = state.betas
            m *= DTYPE(b1)
            m += DTYPE(1 - b1) * g
            v *= DTYPE(b2)
            v += DTYPE(1 - b2) * (g * g)
            mhat = m / DTYPE(1 - b1 ** t)
            vhat = v / DTYPE(1 - b2 ** t)
            p.values -= DTYPE(state.lr) * mhat / (np.sqrt(vhat) + DTYPE(state.eps))


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise TensorError(f"cosine_lr: total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise TensorError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
