"""Minimal reverse-mode autodiff over numpy arrays, dense nets, and Adam.

Everything trainable in the package is built from these pieces: a small
tape of array operations, fully connected nets with smooth activations,
a closed-form differentiable input-gradient for scalar nets (needed by
the Lipschitz penalty), and a bias-corrected adaptive-moment optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalError(RuntimeError):
    """A computation produced non-finite values; carries diagnostics."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph wrapping a float64 array.

    Gradients are accumulated only into nodes with ``requires=True`` or
    with at least one requiring ancestor.
    """

    __slots__ = ("value", "grad", "_parents", "_bwd", "requires")

    def __init__(self, value, parents=(), bwd=None, requires=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bwd = bwd
        self.requires = requires or any(p.requires for p in parents)

    @property
    def shape(self):
        return self.value.shape

    # -- elementwise -------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, (self, other))
        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)
        out._bwd = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value - other.value, (self, other))
        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)
        out._bwd = bwd
        return out

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, (self, other))
        a, b = self.value, other.value
        def bwd(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)
        out._bwd = bwd
        return out

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor(-self.value, (self,))
        out._bwd = lambda g: (-g,)
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value @ other.value, (self, other))
        a, b = self.value, other.value
        def bwd(g):
            return g @ b.T, a.T @ g
        out._bwd = bwd
        return out

    @property
    def T(self):
        out = Tensor(self.value.T, (self,))
        out._bwd = lambda g: (g.T,)
        return out

    def tanh(self):
        t = np.tanh(self.value)
        out = Tensor(t, (self,))
        out._bwd = lambda g: (g * (1.0 - t * t),)
        return out

    def exp(self):
        e = np.exp(self.value)
        out = Tensor(e, (self,))
        out._bwd = lambda g: (g * e,)
        return out

    def square(self):
        out = Tensor(self.value * self.value, (self,))
        v = self.value
        out._bwd = lambda g: (2.0 * g * v,)
        return out

    def power(self, n: int):
        if n < 1 or n != int(n):
            raise ValueError("integer power >= 1 required")
        out = Tensor(self.value ** n, (self,))
        v = self.value
        out._bwd = lambda g: (g * n * v ** (n - 1),)
        return out

    def sqrt(self):
        r = np.sqrt(self.value)
        out = Tensor(r, (self,))
        # guard the derivative at 0 (true gradient does not exist there)
        out._bwd = lambda g: (g * 0.5 / np.maximum(r, 1e-300),)
        return out

    # -- reductions --------------------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.value.sum(axis=axis), (self,))
        shape = self.shape
        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
        out._bwd = bwd
        return out

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def item(self) -> float:
        return float(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value, parents, vjp) -> Tensor:
    """Insert a hand-differentiated operation into the graph.

    ``vjp(upstream)`` must return one cotangent per parent, matching the
    parents' shapes.
    """
    out = Tensor(value, tuple(parents))
    out._bwd = vjp
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``grad`` on requiring nodes."""
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        cots = node._bwd(node.grad)
        for parent, cot in zip(node._parents, cots):
            if not parent.requires:
                continue
            if parent.grad is None:
                parent.grad = np.array(cot, dtype=np.float64)
            else:
                parent.grad = parent.grad + cot


_ACTIVATIONS = ("tanh",)


class DenseNet:
    """Fully connected net with smooth hidden activations and linear output.

    Weights are drawn uniformly scaled by 1/sqrt(fan_in) from the supplied
    generator, so construction is reproducible from a seed.
    """

    def __init__(self, widths, rng: np.random.Generator, activation: str = "tanh"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"need at least two positive layer widths, got {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS} (smooth)")
        self.widths = widths
        self.activation = activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires=True))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def zero_last_layer(self) -> None:
        self.weights[-1].value[:] = 0.0
        self.biases[-1].value[:] = 0.0

    def _check_batch(self, x: Tensor) -> None:
        if x.value.ndim != 2 or x.value.shape[1] != self.in_width:
            raise ValueError(
                f"batch shape {x.value.shape} incompatible with input width {self.in_width}"
            )

    def _trace(self, x: Tensor):
        """Forward pass keeping the hidden activation nodes."""
        self._check_batch(x)
        acts = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh()
                acts.append(h)
        return acts, h

    def forward(self, x) -> Tensor:
        _, out = self._trace(as_tensor(x))
        return out

    def input_gradient(self, x) -> Tensor:
        """Per-row gradient of a scalar-output net w.r.t. its input.

        Built as an explicit product of weight matrices and activation
        derivative factors, so the result is itself differentiable w.r.t.
        the net parameters (the penalty pathway relies on this).
        """
        if self.out_width != 1:
            raise ValueError("input_gradient requires a scalar-output net")
        x = as_tensor(x)
        acts, _ = self._trace(x)
        n = x.value.shape[0]
        cot = Tensor(np.ones((n, 1)))
        for i in range(len(self.weights) - 1, -1, -1):
            cot = cot @ self.weights[i].T
            if i > 0:
                a = acts[i - 1]
                cot = cot * (1.0 - a.square())
        return cot


def forward_net(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    """Plain forward evaluation returning an array."""
    return net.forward(np.asarray(batch, dtype=np.float64)).value


def grad_params(net: DenseNet, batch: np.ndarray, loss_fn) -> list[np.ndarray]:
    """Gradients of ``loss_fn(net(batch))`` w.r.t. every weight and bias.

    ``loss_fn`` must map the output tensor to a scalar tensor.
    """
    out = net.forward(np.asarray(batch, dtype=np.float64))
    loss = loss_fn(out)
    if not isinstance(loss, Tensor) or loss.value.ndim != 0:
        raise ValueError("loss closure must return a scalar tensor")
    backward(loss)
    return [np.zeros_like(p.value) if p.grad is None else p.grad for p in net.params()]


def grad_input(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    """Per-row input gradients of a scalar-output net, as an array."""
    return net.input_gradient(np.asarray(batch, dtype=np.float64)).value


@dataclass
class OptState:
    """Adaptive-moment accumulators for one parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, **kw) -> "OptState":
        shapes = [np.shape(p.value if isinstance(p, Tensor) else p) for p in params]
        return cls(lr=lr, m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kw)


def adam_step(params, grads, state: OptState, direction: str = "descend"):
    """One bias-corrected adaptive-moment update; returns (new_params, state).

    ``descend`` subtracts the update, ``ascend`` adds it. Non-finite
    gradients abort with diagnostics rather than corrupting the state.
    """
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state lengths disagree")
    for i, g in enumerate(grads):
        bad = np.size(g) - np.count_nonzero(np.isfinite(g))
        if bad:
            raise NumericalError(
                f"non-finite gradient for parameter {i} "
                f"(shape {np.shape(g)}, {bad} bad entries)"
            )
    state.step += 1
    t = state.step
    sign = -1.0 if direction == "descend" else 1.0
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = p.value if isinstance(p, Tensor) else p
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter {i}: shape {np.shape(p)} vs gradient {np.shape(g)}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        new.append(p + sign * state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return new, state


def apply_adam(net_params: list[Tensor], grads, state: OptState, direction: str) -> None:
    """Run adam_step and write the results back into the parameter tensors."""
    new, _ = adam_step(net_params, grads, state, direction)
    for p, n in zip(net_params, new):
        p.value[...] = n
