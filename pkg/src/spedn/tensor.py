"""Dense float64 tensors with reverse-mode differentiation.

Small on purpose: every op builds a node holding its parents and a closure
that routes the output gradient back to them.  `Tensor.backward` walks the
graph once in reverse topological order.  A finite-difference harness
(`grad_check`), a named parameter store with seeded initialization, Adam,
and a bit-exact binary checkpoint format round out the module.
"""

import contextlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


_GRAD_STACK = [True]


@contextlib.contextmanager
def no_grad():
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled():
    return _GRAD_STACK[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars only on the non-tensor side
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def constant(data):
    return Tensor(data)


# -- arithmetic -----------------------------------------------------------

def add(a, b):
    if a.shape == b.shape:
        def back(dy):
            _accum(a, dy)
            _accum(b, dy)
        return _make(a.data + b.data, (a, b), back)
    if len(a.shape) == 2 and b.shape == (a.shape[1],):
        def back(dy):
            _accum(a, dy)
            _accum(b, dy.sum(axis=0))
        return _make(a.data + b.data, (a, b), back)
    raise ShapeError(f"add shapes {a.shape} and {b.shape}")


def add_scalar(a, c):
    c = float(c)

    def back(dy):
        _accum(a, dy)

    return _make(a.data + c, (a,), back)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape}")

    def back(dy):
        _accum(a, dy * b.data)
        _accum(b, dy * a.data)

    return _make(a.data * b.data, (a, b), back)


def mul_scalar(a, c):
    c = float(c)

    def back(dy):
        _accum(a, dy * c)

    return _make(a.data * c, (a,), back)


def power(a, p):
    """Elementwise a ** p for a fixed exponent.  Keep the base positive
    when p is fractional; no domain checking here."""
    p = float(p)
    out = a.data**p

    def back(dy):
        _accum(a, dy * p * a.data ** (p - 1.0))

    return _make(out, (a,), back)


def matmul(a, b):
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")

    def back(dy):
        _accum(a, dy @ b.data.T)
        _accum(b, a.data.T @ dy)

    return _make(a.data @ b.data, (a, b), back)


def transpose(a):
    if len(a.shape) != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")

    def back(dy):
        _accum(a, dy.T)

    return _make(a.data.T.copy(), (a,), back)


def reshape(a, shape):
    old = a.shape

    def back(dy):
        _accum(a, dy.reshape(old))

    return _make(a.data.reshape(shape), (a,), back)


def pair_dot(a, b):
    """out[t, j] = sum_k a[t, k] * b[t, j, k]; the row-wise score pattern."""
    if len(a.shape) != 2 or len(b.shape) != 3 or a.shape[0] != b.shape[0] or a.shape[1] != b.shape[2]:
        raise ShapeError(f"pair_dot shapes {a.shape} and {b.shape}")

    def back(dy):
        _accum(a, np.einsum("tj,tjk->tk", dy, b.data))
        _accum(b, dy[:, :, None] * a.data[:, None, :])

    return _make(np.einsum("tk,tjk->tj", a.data, b.data), (a, b), back)


# -- shape surgery --------------------------------------------------------

def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(dy):
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            idx = [slice(None)] * dy.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, dy[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def slice_axis(a, start, stop, axis=0):
    idx = [slice(None)] * len(a.shape)
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(dy):
        g = np.zeros_like(a.data)
        g[idx] = dy
        _accum(a, g)

    return _make(a.data[idx].copy(), (a,), back)


def split(a, sizes, axis=0):
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of {a.shape}")
    out = []
    lo = 0
    for s in sizes:
        out.append(slice_axis(a, lo, lo + s, axis))
        lo += s
    return out


# -- nonlinearities -------------------------------------------------------

def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(dy):
        _accum(a, dy * out * (1.0 - out))

    return _make(out, (a,), back)


def tanh(a):
    out = np.tanh(a.data)

    def back(dy):
        _accum(a, dy * (1.0 - out * out))

    return _make(out, (a,), back)


def relu(a):
    mask = a.data > 0

    def back(dy):
        _accum(a, dy * mask)

    return _make(a.data * mask, (a,), back)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(dy):
        inner = (dy * out).sum(axis=axis, keepdims=True)
        _accum(a, (dy - inner) * out)

    return _make(out, (a,), back)


def logsumexp(a, axis=None):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze() if axis is None else np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def back(dy):
        if axis is None:
            _accum(a, dy * soft)
        else:
            _accum(a, np.expand_dims(dy, axis) * soft)

    return _make(out, (a,), back)


# -- reductions -----------------------------------------------------------

def tsum(a, axis=None):
    if axis is None:
        def back(dy):
            _accum(a, np.full_like(a.data, float(dy)))
        return _make(a.data.sum(), (a,), back)

    def back(dy):
        _accum(a, np.broadcast_to(np.expand_dims(dy, axis), a.shape).copy())

    return _make(a.data.sum(axis=axis), (a,), back)


def tmean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul_scalar(tsum(a, axis), 1.0 / n)


def max_pool(a, axis=0):
    am = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis)

    def back(dy):
        g = np.zeros_like(a.data)
        idx = np.expand_dims(am, axis)
        np.put_along_axis(g, idx, np.expand_dims(dy, axis), axis)
        _accum(a, g)

    return _make(out, (a,), back)


# -- lookup, dropout, losses ---------------------------------------------

def embedding_lookup(table, indices):
    if len(table.shape) != 2:
        raise ShapeError(f"embedding table must be a matrix, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table {table.shape}")

    def back(dy):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.ravel(), dy.reshape(-1, table.shape[1]))

    return _make(table.data[idx], (table,), back)


def dropout(a, rate, train, rng):
    """Inverted dropout: scaling happens at train time, eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


def cross_entropy(logits, targets):
    """Per-row negative log-likelihood, stable in log space.

    logits: (n, V); targets: length-n ints.  Returns shape (n,).
    """
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy needs (n, V) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy targets {t.shape} for logits {logits.shape}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.arange(len(t))
    out = lse - x[rows, t]
    soft = np.exp(x - m)
    soft /= soft.sum(axis=1, keepdims=True)

    def back(dy):
        g = soft * dy[:, None]
        g[rows, t] -= dy
        _accum(logits, g)

    return _make(out, (logits,), back)


# -- finite differences ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: tuple
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def _rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(fn, inputs, tolerance=1e-4, h=1e-5):
    """Compare reverse-mode gradients of the scalar fn(inputs) against
    central finite differences, elementwise over every input tensor."""
    for t in inputs:
        t.grad = None
    out = fn(inputs)
    out.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]

    per_input = []
    worst = 0.0
    for k, t in enumerate(inputs):
        err = 0.0
        flat = t.data.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            with no_grad():
                up = float(fn(inputs).data)
            flat[i] = keep - h
            with no_grad():
                down = float(fn(inputs).data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            err = max(err, _rel_err(analytic[k].ravel()[i], numeric))
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(worst, tuple(per_input), tolerance)


# -- parameters, Adam, checkpoints ---------------------------------------

class ParameterStore:
    def __init__(self, seed=0):
        self.params = {}
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.opt_state = {}

    def _add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def weight(self, name, shape):
        fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self.rng.uniform(-limit, limit, size=shape))

    def bias(self, name, shape):
        return self._add(name, np.zeros(shape))

    def embedding(self, name, shape):
        return self._add(name, self.rng.normal(0.0, 0.1, size=shape))

    def tensor(self, name, data):
        return self._add(name, np.asarray(data, dtype=np.float64))

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def items(self):
        return [(n, self.params[n]) for n in self.names()]

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


def adam_step(store, grads=None, lr=0.01, betas=(0.9, 0.999), eps=1e-8, t=1):
    """Standard Adam with bias correction.  Parameters without a gradient
    are left untouched.  Moment buffers live in the store."""
    if t < 1:
        raise ValueError(f"adam step index must be >= 1, got {t}")
    b1, b2 = betas
    for name, p in store.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            continue
        m, v = store.opt_state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        store.opt_state[name] = (m, v)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def save_checkpoint(store, path):
    with open(path, "wb") as fh:
        fh.write(f"ckpt v1 {len(store.params)}\n".encode("ascii"))
        for name, p in store.items():
            dims = " ".join(str(d) for d in p.data.shape)
            fh.write(f"{name} {dims}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, store=None):
    if store is None:
        store = ParameterStore()
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != "ckpt" or header[1] != "v1":
            raise ValueError(f"{path}: not a checkpoint file")
        count = int(header[2])
        for _ in range(count):
            fields = fh.readline().decode("ascii").split()
            if not fields:
                raise ValueError(f"{path}: truncated checkpoint")
            name, dims = fields[0], tuple(int(d) for d in fields[1:])
            n = int(np.prod(dims)) if dims else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated data for {name!r}")
            data = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
            if name in store.params:
                store.params[name].data = data
            else:
                store._add(name, data)
    return store
