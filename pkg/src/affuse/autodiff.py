"""Define-by-run reverse-mode differentiation over the NCHW kernels.

Operations executed while a :class:`Tape` is active and that touch a
gradient-requiring value are appended to the tape. ``Tape.backward`` then
walks the recorded nodes in exact reverse order, accumulating gradients
additively where a value fans out.

Outside an active tape the same functions only compute values, which is
what evaluation passes use.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as K
from .tensor import DimensionError

__all__ = [
    "Var",
    "Parameter",
    "Tape",
    "StateError",
    "active_tape",
    "constant",
    "conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "add",
    "sub",
    "mul",
    "one_minus",
    "scale",
    "concat_channels",
    "upsample2x",
    "fully_connected",
    "softmax_cross_entropy",
    "grad_check",
]


class StateError(RuntimeError):
    """Operation requested in the wrong lifecycle state."""


class Var:
    """A value in the computation, optionally tracked for gradients."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = value
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


class Parameter(Var):
    """A named learnable tensor. ``grad`` accumulates until :meth:`zero_grad`."""

    __slots__ = ("name", "trainable", "decay")

    def __init__(self, value, name: str = "", trainable: bool = True, decay: bool = True):
        super().__init__(np.ascontiguousarray(value, dtype=K.get_dtype()),
                         requires_grad=trainable, op="param")
        self.name = name
        self.trainable = trainable
        self.decay = decay
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


_tape_stack: List["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of the differentiable operations of one forward pass.

    >>> x = Var(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     z = mul(x, x)
    >>> grads = tape.backward(z)
    >>> float(grads[x][0, 0, 0, 0])
    6.0
    """

    def __init__(self):
        self.nodes: List[Var] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, node: Var) -> None:
        self.nodes.append(node)

    def backward(self, output: Var, seed=None) -> Dict[Var, np.ndarray]:
        """Propagate ``seed`` (default ones) from ``output`` back to the leaves.

        Returns a mapping from every gradient-requiring leaf reached to its
        gradient for this pass. Parameters additionally accumulate into
        ``Parameter.grad``.
        """
        if not any(n is output for n in self.nodes):
            raise StateError("backward called before a recorded forward for this output")
        if self._done:
            raise StateError("tape already consumed by a previous backward pass")
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.value.shape:
            raise DimensionError(f"seed shape {seed.shape} does not match output {output.value.shape}")

        # Var has identity hashing, so it can key the gradient table directly.
        grads: Dict[Var, np.ndarray] = {output: seed}
        leaves: List[Var] = []
        for node in reversed(self.nodes):
            g = grads.pop(node, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
                    if parent.backward_fn is None:
                        leaves.append(parent)
        self._done = True
        result = {}
        for leaf in leaves:
            g = grads[leaf]
            if isinstance(leaf, Parameter):
                leaf.grad = leaf.grad + g
            result[leaf] = g
        return result


def constant(x) -> Var:
    return x if isinstance(x, Var) else Var(K.as_tensor(x) if np.ndim(x) == 4 else np.asarray(x))


_op_hook: Optional[Callable] = None


def set_op_hook(hook: Optional[Callable]) -> Optional[Callable]:
    """Install ``hook(op, value, parents)`` called on every op; returns the previous hook."""
    global _op_hook
    prev, _op_hook = _op_hook, hook
    return prev


def _make(value, parents: Sequence[Var], backward_fn, op: str) -> Var:
    if _op_hook is not None:
        _op_hook(op, value, parents)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Var(value, op=op)
    out = Var(value, requires_grad=True, op=op)
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# primitive ops


def conv2d(x: Var, w: Var, b: Optional[Var] = None, stride: int = 1, padding: int = 0) -> Var:
    xv, wv = x.value, w.value
    out = K.conv2d_raw(xv, wv, stride, padding, None if b is None else b.value)
    k = wv.shape[2]
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            xp_shape = (xv.shape[0], xv.shape[1], xv.shape[2] + 2 * padding, xv.shape[3] + 2 * padding)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    # (C_in, N, Ho, Wo) contribution of this tap
                    contrib = np.tensordot(wv[:, :, i, j], g, axes=([0], [1]))
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + xv.shape[2], padding:padding + xv.shape[3]] if padding else gxp
        if w.requires_grad:
            xp = K._pad(xv, padding)
            gw = np.empty_like(wv)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                    gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv2d")


def batch_norm(x: Var, gamma: Var, beta: Var, running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, momentum: float = 0.9, train: bool = True) -> Var:
    """Batch norm. Train mode differentiates through the batch statistics;
    eval mode treats the running statistics as constants."""
    out, x_hat, inv_std = K.batch_norm_raw(x.value, gamma.value, beta.value, running_mean,
                                           running_var, eps, momentum, train)
    shape = (1, -1, 1, 1)

    def backward(g):
        ggamma = (g * x_hat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.value.reshape(shape)
            if train:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * x_hat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - x_hat * mean_gx) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Var) -> Var:
    out = K.relu(x.value)
    return _make(out, (x,), lambda g: (g * (x.value > 0),), "relu")


def sigmoid(x: Var) -> Var:
    out = K.sigmoid(x.value)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def global_avg_pool(x: Var) -> Var:
    out = K.global_avg_pool(x.value)
    hw = x.value.shape[2] * x.value.shape[3]
    shape = x.value.shape
    return _make(out, (x,), lambda g: (np.broadcast_to(g / hw, shape).copy(),), "gap")


def add(x: Var, y: Var) -> Var:
    """Elementwise sum; ``y`` may be ``N x C x 1 x 1`` and is then broadcast."""
    if x.value.shape[2:] == (1, 1) and y.value.shape[2:] != (1, 1):
        out = K.broadcast_add(y.value, x.value)
    else:
        out = K.broadcast_add(x.value, y.value)
    xs, ys = x.value.shape, y.value.shape
    return _make(out, (x, y), lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)), "add")


def sub(x: Var, y: Var) -> Var:
    if x.value.shape != y.value.shape:
        raise DimensionError(f"sub: shapes {x.value.shape} and {y.value.shape} differ")
    return _make(x.value - y.value, (x, y), lambda g: (g, -g), "sub")


def mul(x: Var, y: Var) -> Var:
    """Hadamard product; either operand may be ``N x C x 1 x 1``."""
    xv, yv = x.value, y.value
    if xv.shape[2:] == (1, 1) and yv.shape[2:] != (1, 1):
        out = K.elementwise_mul(yv, xv)
    else:
        out = K.elementwise_mul(xv, yv)

    def backward(g):
        gx = _unbroadcast(g * yv, xv.shape) if x.requires_grad else None
        gy = _unbroadcast(g * xv, yv.shape) if y.requires_grad else None
        return gx, gy

    return _make(out, (x, y), backward, "mul")


def one_minus(x: Var) -> Var:
    return _make(1.0 - x.value, (x,), lambda g: (-g,), "one_minus")


def scale(x: Var, c: float) -> Var:
    return _make(x.value * c, (x,), lambda g: (g * c,), "scale")


def concat_channels(x: Var, y: Var) -> Var:
    out = K.concat_channels(x.value, y.value)
    c = x.value.shape[1]
    return _make(out, (x, y), lambda g: (g[:, :c], g[:, c:]), "concat")


def broadcast_to(x: Var, shape) -> Var:
    """Replicate an ``N x C x 1 x 1`` value over ``shape``'s spatial grid."""
    src = x.value.shape
    if src[:2] != tuple(shape[:2]) or (src[2:] != (1, 1) and src[2:] != tuple(shape[2:])):
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}")
    out = np.broadcast_to(x.value, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


def upsample2x(x: Var) -> Var:
    out = K.nearest_upsample2x(x.value)
    n, c, h, w = x.value.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample2x")


def fully_connected(x: Var, w: Var, b: Optional[Var] = None) -> Var:
    out = K.fully_connected(x.value, w.value, None if b is None else b.value)
    x2 = x.value[:, :, 0, 0]

    def backward(g):
        g2 = g[:, :, 0, 0]
        gx = (g2 @ w.value)[:, :, None, None] if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "fc")


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy as a 1x1x1x1 value (so it can seed ``backward``)."""
    lv = logits.value
    labels = K._check_labels(lv, labels)
    logp = K.log_softmax(lv)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    loss = -picked.mean()
    count = picked.size

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[:, None], np.take_along_axis(p, labels[:, None], axis=1) - 1.0, axis=1)
        return (p * (g.reshape(()) / count),)

    return _make(np.full((1, 1, 1, 1), loss, dtype=lv.dtype), (logits,), backward, "xent")


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(fn: Callable[..., Var], inputs: Sequence[np.ndarray] = (),
               params: Sequence[Parameter] = (), step: float = 1e-5,
               n_trials: Optional[int] = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` receives one :class:`Var` per entry of ``inputs`` and returns an
    output :class:`Var`. The scalar objective is ``sum(out * R)`` for a fixed
    random ``R``. Every scalar of every input and parameter is perturbed by
    ``+-step``; with ``n_trials`` set, only that many randomly chosen
    scalars per tensor are checked.

    Returns the max relative error ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if K.get_precision() != "f64":
        raise StateError("grad_check requires f64 precision")
    # separate stream so R never coincides with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x6C])
    arrays = [np.array(a, dtype=np.float64) for a in inputs]

    def objective():
        return fn(*[Var(a) for a in arrays]).value

    with Tape() as tape:
        xs = [Var(a, requires_grad=True) for a in arrays]
        saved = [p.grad for p in params]
        for p in params:
            p.zero_grad()
        out = fn(*xs)
    R = rng.standard_normal(out.value.shape)
    grads = tape.backward(out, R)
    analytic = [grads.get(x, np.zeros_like(x.value)) for x in xs]
    analytic += [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    def f_scalar():
        return float(np.sum(objective() * R))

    worst = 0.0
    targets = list(arrays) + [p.value for p in params]
    for arr, ga in zip(targets, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if n_trials is not None and n_trials < flat.size:
            idx = rng.choice(flat.size, size=n_trials, replace=False)
        num = np.empty(idx.size)
        for t, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f_scalar()
            flat[i] = orig - step
            fm = f_scalar()
            flat[i] = orig
            num[t] = (fp - fm) / (2.0 * step)
        if idx.size:
            worst = max(worst, float(relative_error(ga.reshape(-1)[idx], num).max()))
    return worst
