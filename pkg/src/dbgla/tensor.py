"""Dense float64 tensors with reverse-mode gradients.

Every differentiable function in this module returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to the
parent gradients. :meth:`Tensor.backward` walks that recorded graph once in
reverse topological order, accumulates ``.grad`` on the leaves and then drops
the graph so intermediate arrays can be freed.

Conventions: rows are samples, the last axis is channels. A linear layer maps
``x[..., in_dim] -> x @ W.T + b`` with ``W`` of shape ``(out_dim, in_dim)``.
"""

import io
import json
import math
import zipfile

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StorageError

DTYPE = np.float64
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Populate ``.grad`` of every leaf that requires it with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise ConfigError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _topological_order(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Smooth gating nonlinearity, tanh form."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


def clip(a, lo, hi):
    """Clamp values; the gradient is zero where the clamp is active."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(out, (a,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis, keepdims=False):  # noqa: A001
    """Maximum along one axis; ties send the gradient to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    return _result(out, (a,), backward)


# --------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b):
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def softmax(a, axis=-1):
    """Max-subtracted softmax. Non-finite input raises :class:`NumericError`."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax received non-finite logits")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis=-1):
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax received non-finite logits")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), backward)


# --------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(a, index):
    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _result(a.data[index], (a,), backward)


def take(a, index):
    """Gather rows: ``out[...] = a[index[...]]`` for an integer array of any shape."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _result(a.data[index], (a,), backward)


def segment_sum(a, segment_ids, num_segments):
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.zeros((num_segments,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, segment_ids, a.data)
    return _result(out, (a,), lambda g: (g[segment_ids],))


def segment_max(a, segment_ids, num_segments):
    """Row-wise maximum per segment; ties route the gradient to the lowest row."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.full((num_segments,) + a.shape[1:], -np.inf)
    np.maximum.at(out, segment_ids, a.data)
    hit = a.data == out[segment_ids]
    rows = np.arange(a.shape[0]).reshape((-1,) + (1,) * (a.ndim - 1))
    first_row = np.full(out.shape, a.shape[0])
    np.minimum.at(first_row, segment_ids, np.where(hit, rows, a.shape[0]))
    first = rows == first_row[segment_ids]

    def backward(g):
        return (g[segment_ids] * first,)

    return _result(out, (a,), backward)


# --------------------------------------------------------------------------
# layers


class Module:
    """Container whose Tensor, Module and list-of-Module attributes are parameters."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(np.sum([p.data.size for p in self.parameters()]))


def parameter(data):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


class LinearLayer(Module):
    def __init__(self, in_dim, out_dim, rng=None, bias=True):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"linear layer dimensions must be positive, got {in_dim}->{out_dim}")
        rng = np.random.default_rng(0) if rng is None else rng
        s = math.sqrt(1.0 / in_dim)
        self.weight = parameter(rng.uniform(-s, s, size=(out_dim, in_dim)))
        self.bias = parameter(rng.uniform(-s, s, size=out_dim) if bias else np.zeros(out_dim))

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return linear_apply(self, x)


def linear_apply(layer, x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != layer.in_dim:
        raise ShapeError(f"linear layer expects last dim {layer.in_dim}, got input shape {x.shape}")
    return add(matmul(x, transpose(layer.weight)), layer.bias) if x.ndim >= 2 else reshape(
        add(matmul(reshape(x, (1, -1)), transpose(layer.weight)), layer.bias), (layer.out_dim,)
    )


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, module, metadata=None):
    """Write parameters as float64 arrays plus a JSON metadata record.

    The file is an ``.npz`` archive with fixed entry timestamps, so equal
    parameters give byte-identical files. Values round-trip bit-exactly; the
    version key is mandatory on load.
    """
    arrays = {f"param/{name}": p.data for name, p in module.named_parameters()}
    meta = {"version": CHECKPOINT_VERSION, **(metadata or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    try:
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for key, value in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(value), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path):
    """Return ``(params, metadata)`` where params maps name to array."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(npz["__meta__"].tobytes().decode())
            params = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return params, meta


def load_parameters(module, params):
    own = dict(module.named_parameters())
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in own.items():
        if params[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {params[name].shape} vs model {p.shape}")
        p.data = np.array(params[name], dtype=DTYPE)
