"""Tape-based reverse-mode differentiation over a small primitive vocabulary.

The vocabulary is exactly what the fusion head and the training losses need
(adds/muls, matmul, reductions, relu/softplus/exp/log, softmax, layer norm,
abs, gather for nearest-neighbor losses, concat/slice/reshape), which keeps
it exhaustively gradient-checkable.  Values are held as float64 regardless
of input dtype so reductions are reproducible.

A Tensor is an immutable graph node; backward() walks the tape in reverse
topological order and accumulates into .grad.  Repeated backward calls
accumulate; call zero_grad explicitly between steps.
"""

from __future__ import annotations

import numpy as np

from .errors import InvariantError


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "parents", "_vjps", "op")

    # make ndarray <op> Tensor defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=(), op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self._vjps = vjps
        self.op = op

    # -- graph plumbing ----------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def item(self) -> float:
        return float(self.value)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # -- arithmetic --------------------------------------------------------
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

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Parameter(Tensor):
    """Trainable leaf with AdamW moment buffers."""

    __slots__ = ("name", "m", "v")

    def __init__(self, value, name: str):
        super().__init__(value, op="param")
        self.name = name
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=float))


def _node(value, pairs, op):
    parents = tuple(p for p, _ in pairs)
    vjps = tuple(v for _, v in pairs)
    return Tensor(value, parents, vjps, op)


# -- primitives -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ], "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ], "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ], "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value / b.value, [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
    ], "div")


def matmul(a, b):
    """2-D or equal-batch stacked matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value @ b.value, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)),
    ], "matmul")


def vsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _node(a.value.sum(axis=axis, keepdims=keepdims), [(a, vjp)], "sum")


def vmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)], "relu")


def softplus(a):
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.value), [(a, lambda g: g * _sigmoid(a.value))], "softplus")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, [(a, lambda g: g * out)], "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.value), [(a, lambda g: g / a.value)], "log")


def absval(a):
    a = as_tensor(a)
    sign = np.sign(a.value)
    return _node(np.abs(a.value), [(a, lambda g: g * sign)], "abs")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node(out, [(a, vjp)], "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.value * xhat + bias.value

    def vjp_x(g):
        gx = g * gain.value
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    def vjp_gain(g):
        return _unbroadcast(g * xhat, gain.shape)

    def vjp_bias(g):
        return _unbroadcast(g, bias.shape)

    return _node(out, [(x, vjp_x), (gain, vjp_gain), (bias, vjp_bias)], "layer_norm")


def gather_rows(a, idx):
    """Select rows along axis 0 by an integer index array (min-index gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _node(a.value[idx], [(a, vjp)], "gather")


def take(a, key):
    """Basic (non-repeating) indexing/slicing."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[key] += g
        return out

    return _node(a.value[key], [(a, vjp)], "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    pairs = []
    for i, t in enumerate(tensors):
        def vjp(g, i=i):
            return np.split(g, splits, axis=axis)[i]
        pairs.append((t, vjp))
    return _node(np.concatenate([t.value for t in tensors], axis=axis), pairs, "concat")


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))], "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(a.value.transpose(axes), [(a, lambda g: g.transpose(inv))], "transpose")


def l1_mean(a):
    """Mean absolute value over all elements."""
    return vmean(absval(a))


def sq_l2(a):
    """Sum of squares over all elements."""
    a = as_tensor(a)
    return vsum(mul(a, a))


# -- backward ----------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Propagate d(root)/d(node) into .grad for every node reachable from root.

    root must be scalar; repeated calls add their contribution, so gradients
    accumulate linearly until zero_grad.
    """
    if root.size != 1:
        raise InvariantError(f"backward root must be scalar, got shape {root.shape}")
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = on stack, 1 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 1
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 1:
            continue
        if mark == 0:
            raise InvariantError("cycle detected in computation graph")
        state[id(node)] = 0
        stack.append((node, True))
        for p in node.parents:
            if state.get(id(p)) != 1:
                stack.append((p, False))
    # this pass's gradients live in a scratch map so earlier passes' grads
    # are not re-propagated
    scratch: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = scratch.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node._vjps):
            contrib = vjp(g)
            key = id(parent)
            if key in scratch:
                scratch[key] = scratch[key] + contrib
            else:
                scratch[key] = contrib
    for node in order:
        g = scratch.get(id(node))
        if g is not None:
            node.accumulate(g)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# -- optimizer ----------------------------------------------------------------

def adamw_step(params, lr, beta1=0.9, beta2=0.95, weight_decay=0.05,
               step_count=1, eps=1e-8) -> None:
    """Decoupled-weight-decay adaptive-moment update with bias correction.

    Moments are updated in place; gradients are left untouched.  step_count
    is 1-based.
    """
    bc1 = 1.0 - beta1 ** step_count
    bc2 = 1.0 - beta2 ** step_count
    for p in params:
        if p.grad is None:
            raise InvariantError(f"parameter {p.name!r} has no gradient")
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        mhat = p.m / bc1
        vhat = p.v / bc2
        p.value -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.value)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- gradient checking ---------------------------------------------------------

class GradCheckReport:
    def __init__(self, tol: float):
        self.tol = tol
        self.max_rel_error = 0.0
        self.entries: list[dict] = []
        self.non_smooth: list[dict] = []

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "tol": self.tol,
            "passed": self.passed,
            "checked_entries": len(self.entries),
            "non_smooth_excluded": len(self.non_smooth),
        }


def grad_check(fn, points: dict[str, np.ndarray], h: float = 1e-4, tol: float = 1e-4,
               rng=None, entries_per_input: int = 5) -> GradCheckReport:
    """Compare backward gradients with central finite differences.

    fn receives {name: Tensor} and returns a scalar Tensor.  A random sample
    of entries of every input is perturbed; entries where the second
    difference reveals a kink (relu corners, nearest-neighbor ties) are
    reported as non-smooth and excluded from the max relative error.
    """
    rng = rng or np.random.default_rng(0)
    points = {k: np.asarray(v, dtype=float) for k, v in points.items()}
    leaves = {k: Tensor(v.copy()) for k, v in points.items()}
    out = fn(leaves)
    if not isinstance(out, Tensor):
        raise InvariantError("grad_check target must return a Tensor")
    backward(out)
    f0 = float(out.value)
    if not np.isfinite(f0):
        raise InvariantError("non-finite function value at the check point")
    report = GradCheckReport(tol)
    for name, base in points.items():
        grad = leaves[name].grad
        if grad is None:
            grad = np.zeros_like(base)
        flat = base.ravel()
        n_check = min(entries_per_input, flat.size)
        idxs = rng.choice(flat.size, size=n_check, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(fn({k: Tensor(v) for k, v in points.items()}).value)
            flat[idx] = orig - h
            fm = float(fn({k: Tensor(v) for k, v in points.items()}).value)
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise InvariantError("non-finite evaluation during finite differencing")
            fd = (fp - fm) / (2.0 * h)
            ad = grad.ravel()[idx]
            entry = {"input": name, "index": int(idx), "ad": float(ad), "fd": float(fd)}
            # second difference ~ h^2 f'' for smooth f; a kink makes it O(h)
            scale = max(1.0, abs(f0), abs(fp), abs(fm))
            kink = abs(fp + fm - 2.0 * f0) > 20.0 * h ** 1.5 * scale
            if kink:
                report.non_smooth.append(entry)
                continue
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-3)
            entry["rel_error"] = rel
            report.entries.append(entry)
            report.max_rel_error = max(report.max_rel_error, rel)
    return report
