"""Dense tensors with tape-based reverse-mode autodiff.

Each op returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward``
walks that graph once in reverse topological order. The op vocabulary is
fixed to what the CNN and ViT classifiers need.

Computation defaults to float32; :func:`float64` switches the default
dtype for gradient checks.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, StateError

_default_dtype = [np.float32]


def default_dtype():
    return _default_dtype[0]


@contextlib.contextmanager
def float64():
    """Run the enclosed block with float64 as the default tensor dtype."""
    prev = _default_dtype[0]
    _default_dtype[0] = np.float64
    try:
        yield
    finally:
        _default_dtype[0] = prev


class Tensor:
    """An n-d array node. Treat ``data`` as read-only once created."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_inputs", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._inputs = ()
        self._backward = None
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise StateError("backward() already ran on this graph; rebuild the forward pass")
        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for inp, gi in zip(node._inputs, node._backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._consumed = True
        self._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def topological_order(root):
    """Nodes reachable from ``root``, each listed after all of its inputs."""
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
        for inp in node._inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, op, inputs, backward):
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        if any(t._consumed for t in inputs):
            raise StateError("cannot extend a graph that has already been back-propagated")
        out.requires_grad = True
        out.op = op
        out._inputs = tuple(inputs)
        out._backward = backward
    else:
        out.op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x):
    out = np.exp(x.data)
    return _record(out, "exp", (x,), lambda g: (g * out,))


def log(x):
    return _record(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def relu(x):
    mask = x.data > 0
    return _record(x.data * mask, "relu", (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record(out, "gelu", (x,), backward)


def _sigmoid(v):
    # branch-free and overflow-free for both signs
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x):
    out = _sigmoid(x.data)
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind):
    try:
        fn = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    return _record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], "getitem", (x,), backward)


def broadcast_to(x, shape):
    return _record(np.broadcast_to(x.data, shape).copy(), "broadcast", (x,),
                   lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward)


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, "matmul", (a, b), backward)


def dense(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x`` (any leading dims)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, "dense", inputs, backward)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(np.ascontiguousarray(out), "conv2d", inputs, backward)


# ---------------------------------------------------------------- normalisation / attention

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, "softmax", (x,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(f"layernorm: last dim {h} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        dxhat = g * gamma.data
        gx = inv / h * (h * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, "layernorm", (x, gamma, beta), backward)


def multi_head_attention(x, params, heads, return_weights=False):
    """Scaled dot-product self-attention over ``x`` of shape N x T x H.

    ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to H x H weights and
    length-H biases; head ``i`` uses columns ``i*d:(i+1)*d`` of each
    projection, with ``d = H // heads``.
    """
    x = as_tensor(x)
    n, t, h = x.shape
    if heads < 1 or h % heads:
        raise ConfigError(f"hidden size {h} is not divisible by heads={heads}")
    d = h // heads

    def split(z):
        return z.reshape(n, t, heads, d).transpose(0, 2, 1, 3)

    q = split(dense(x, params["wq"], params["bq"]))
    k = split(dense(x, params["wk"], params["bk"]))
    v = split(dense(x, params["wv"], params["bv"]))
    scores = mul(matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, t, h)
    out = dense(ctx, params["wo"], params["bo"])
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- losses

def _check_labels(labels, n, c):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"got {labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    return labels


def softmax_cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the batch."""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record(np.asarray(loss, dtype=logits.dtype), "softmax_xent", (logits,), backward)


BCE_EPS = 1e-7


def binary_cross_entropy(prob, labels):
    """Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps]."""
    p = prob.data.reshape(-1)
    y = np.asarray(labels, dtype=prob.dtype).reshape(-1)
    if y.shape[0] != p.shape[0]:
        raise DimensionError(f"got {y.shape[0]} labels for {p.shape[0]} probabilities")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.shape[0]
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()

    def backward(g):
        inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        d = (-y / pc + (1 - y) / (1 - pc)) * inside / n
        return ((g * d).reshape(prob.shape),)

    return _record(np.asarray(loss, dtype=prob.dtype), "bce", (prob,), backward)


def bce_with_logits(logit, labels):
    """Binary cross-entropy of sigmoid(logit), evaluated without saturating.

    Same value as ``binary_cross_entropy(sigmoid(logit), y)`` away from the
    clamp, but the gradient stays nonzero for very confident logits.
    """
    z = logit.data.reshape(-1)
    y = np.asarray(labels, dtype=logit.dtype).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"got {y.shape[0]} labels for {z.shape[0]} logits")
    n = z.shape[0]
    # softplus(z) - y*z, written to avoid overflow
    loss = (np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g):
        # sigmoid(z) - y, with the y=1 branch as -sigmoid(-z) to keep tiny values
        d = np.where(y > 0.5, -_sigmoid(-z), _sigmoid(z)) / n
        return ((g * d).reshape(logit.shape),)

    return _record(np.asarray(loss, dtype=logit.dtype), "bce_logits", (logit,), backward)


# ---------------------------------------------------------------- gradient check

def grad_check(f, x, h=1e-6, analytic=None):
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``analytic`` overrides the tape
    gradient (used to confirm that a wrong gradient is flagged).
    """
    x0 = np.array(x, dtype=np.float64)
    if analytic is None:
        with float64():
            xt = Tensor(x0.copy(), requires_grad=True)
            f(xt).backward()
            analytic = xt.grad
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with float64():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(x0.copy())).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
