"""
Dense tensors with reverse-mode automatic differentiation.

Every primitive the RTS-DOA network needs lives here: 2-D convolution and
its transpose, grouped 1-D convolution, an LSTM-style recurrent cell, scaled
dot-product attention, layer normalization, elementwise nonlinearities and
reductions. A Tensor produced by a primitive keeps references to its parents
and a vector-Jacobian product (vjp); backward() walks that tape in reverse
topological order and sums gradients over fan-out.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes"""


class Tensor:
    """A node of the computation tape (or a constant / parameter leaf)."""

    __array_priority__ = 100

    __slots__ = ("data", "parents", "vjp", "op", "name", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, op="constant", name=None, requires_grad=False):
        self.data = np.asarray(data)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor {self.name or self.op} has shape {self.shape}, not a single value")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def constant(data, dtype=None):
    """Wrap an array as a tensor that never receives a gradient"""
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name):
    """A named leaf that collects gradients"""
    return Tensor(np.asarray(data), op="parameter", name=name, requires_grad=True)


def _lift(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, vjp, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp, op, requires_grad=True)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = _binary(a, b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _binary(a, b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _binary(a, b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _binary(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), vjp, "div")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def identity(x):
    return _make(x.data, (x,), lambda g: (g,), "identity")


# ----------------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------------

def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    out = special.expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(x, alpha=1.0):
    negative = alpha * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, negative)

    def vjp(g):
        return (g * np.where(x.data > 0, 1.0, negative + alpha),)

    return _make(out.astype(x.dtype, copy=False), (x,), vjp, "elu")


def silu(x):
    return mul(x, sigmoid(x))


def softmax(x, axis=-1):
    out = special.softmax(x.data, axis=axis)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out.astype(x.dtype, copy=False), (x,), vjp, "softmax")


def log_softmax(x, axis=-1):
    out = special.log_softmax(x.data, axis=axis)

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out.astype(x.dtype, copy=False), (x,), vjp, "log_softmax")


# ----------------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------------

def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(x, index):
    out = x.data[index]
    basic = _is_basic_index(index)

    def vjp(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(out, (x,), vjp, "getitem")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, reference)) if i != axis % len(reference)
        ):
            raise ShapeError(f"concat: shapes {reference} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors, axis=0):
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def pad(x, pad_width):
    """Zero padding; pad_width follows numpy.pad, one (before, after) per axis"""
    pad_width = tuple(tuple(p) for p in pad_width)
    if len(pad_width) != x.ndim:
        raise ShapeError(f"pad: {len(pad_width)} pad pairs for shape {x.shape}")
    crop = tuple(slice(before, before + size) for (before, _), size in zip(pad_width, x.shape))
    return _make(np.pad(x.data, pad_width), (x,), lambda g: (g[crop],), "pad")


def broadcast_to(x, shape):
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------------------
# dense layers
# ----------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def linear(x, weight, bias=None):
    """x[..., in] times weight[out, in] transposed, plus bias[out]"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift"""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: input shape {x.shape} incompatible with gain {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, np.sum(g * xhat, axis=reduce_axes), np.sum(g, axis=reduce_axes)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), vjp, "layer_norm")


# ----------------------------------------------------------------------------
# convolutions
# ----------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=(1, 1), padding=((0, 0), (0, 0)), groups=1):
    """
    Cross-correlation of x[B, C, H, W] with weight[O, C/groups, kh, kw].

    padding is ((top, bottom), (left, right)); causal time padding is
    ((kh - 1, 0), ...).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    batch, channels, _, _ = x.shape
    out_channels, group_channels, kh, kw = weight.shape
    if channels != group_channels * groups or out_channels % groups:
        raise ShapeError(
            f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape} (groups={groups})"
        )
    sh, sw = stride
    (pt, pb), (pl, pr) = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: input shape {x.shape} smaller than kernel {(kh, kw)}")
    def grouped_windows():
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        return windows.reshape(batch, groups, group_channels, windows.shape[2], windows.shape[3], kh, kw)

    windows_g = grouped_windows()
    ho, wo = windows_g.shape[3], windows_g.shape[4]
    per_group = out_channels // groups
    weight_g = weight.data.reshape(groups, per_group, group_channels, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", windows_g, weight_g, optimize=True)
    out = out.reshape(batch, out_channels, ho, wo)
    del windows_g
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (out_channels,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {out_channels} output channels")
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents = (x, weight, bias)

    def vjp(g):
        gg = g.reshape(batch, groups, per_group, ho, wo)
        gw = np.einsum("bgchwij,bgohw->gocij", grouped_windows(), gg, optimize=True).reshape(weight.shape)
        gwin = np.einsum("bgohw,gocij->bgchwij", gg, weight_g, optimize=True)
        gwin = gwin.reshape(batch, channels, ho, wo, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gwin[..., i, j]
        gx = gxp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out.astype(x.dtype, copy=False), parents, vjp, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=(1, 1), output_padding=(0, 0)):
    """
    Transposed convolution of x[B, Cin, H, W] with weight[Cin, Cout, kh, kw].

    Output size per axis is (n - 1) * stride + kernel + output_padding.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    batch, _, h, w = x.shape
    _, out_channels, kh, kw = weight.shape
    sh, sw = stride
    oph, opw = output_padding
    if not (0 <= oph < max(sh, 1) and 0 <= opw < max(sw, 1)):
        raise ShapeError(f"conv_transpose2d: output padding {output_padding} must be smaller than stride {stride}")
    hout = (h - 1) * sh + kh + oph
    wout = (w - 1) * sw + kw + opw
    contrib = np.einsum("bchw,coij->bohwij", x.data, weight.data, optimize=True)
    out = np.zeros((batch, out_channels, hout, wout), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (h - 1) + 1:sh, j:j + sw * (w - 1) + 1:sw] += contrib[..., i, j]
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (out_channels,):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {out_channels} channels")
        out += bias.data.reshape(1, -1, 1, 1)
        parents = (x, weight, bias)

    def vjp(g):
        gcontrib = np.empty((batch, out_channels, h, w, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcontrib[..., i, j] = g[:, :, i:i + sh * (h - 1) + 1:sh, j:j + sw * (w - 1) + 1:sw]
        gx = np.einsum("bohwij,coij->bchw", gcontrib, weight.data, optimize=True)
        gw = np.einsum("bchw,bohwij->coij", x.data, gcontrib, optimize=True)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out.astype(x.dtype, copy=False), parents, vjp, "conv_transpose2d")


def conv1d(x, weight, bias=None, stride=1, padding=(0, 0), groups=1):
    """Grouped 1-D convolution of x[B, C, L] with weight[O, C/groups, k]"""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and weight, got {x.shape} and {weight.shape}")
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(weight, (weight.shape[0], weight.shape[1], 1, weight.shape[2]))
    out = conv2d(x4, w4, bias, stride=(1, stride), padding=((0, 0), tuple(padding)), groups=groups)
    return reshape(out, (out.shape[0], out.shape[1], out.shape[3]))


# ----------------------------------------------------------------------------
# recurrent cell and attention
# ----------------------------------------------------------------------------

def lstm_cell(gates_x, state, w_hh):
    """
    One LSTM step.

    gates_x[B, 4H] is the input projection (bias included), state[B, 2H] is
    [h | c]; returns the next [h | c]. Gate order is input, forget, cell, output.
    """
    hidden = w_hh.shape[1]
    if w_hh.shape != (4 * hidden, hidden) or gates_x.shape[-1] != 4 * hidden or state.shape[-1] != 2 * hidden:
        raise ShapeError(
            f"lstm_cell: gates {gates_x.shape}, state {state.shape} and recurrent weight {w_hh.shape} disagree"
        )
    h = state.data[:, :hidden]
    c = state.data[:, hidden:]
    z = gates_x.data + h @ w_hh.data.T
    i = special.expit(z[:, :hidden])
    f = special.expit(z[:, hidden:2 * hidden])
    cand = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = special.expit(z[:, 3 * hidden:])
    c_next = f * c + i * cand
    tanh_c = np.tanh(c_next)
    h_next = o * tanh_c

    def vjp(g):
        gh = g[:, :hidden]
        gc = g[:, hidden:] + gh * o * (1.0 - tanh_c * tanh_c)
        dz = np.concatenate(
            [
                gc * cand * i * (1.0 - i),
                gc * c * f * (1.0 - f),
                gc * i * (1.0 - cand * cand),
                gh * tanh_c * o * (1.0 - o),
            ],
            axis=1,
        )
        g_state = np.concatenate([dz @ w_hh.data, gc * f], axis=1)
        return dz, g_state, dz.T @ h

    out = np.concatenate([h_next, c_next], axis=1).astype(gates_x.dtype, copy=False)
    return _make(out, (gates_x, state, w_hh), vjp, "lstm_cell")


def scaled_dot_product_attention(q, k, v, causal=False):
    """softmax(q k^T / sqrt(d)) v over the second-to-last axis"""
    if q.shape[:-2] != k.shape[:-2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {q.shape}, key {k.shape}, value {v.shape} disagree")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.ones((tq, tk), dtype=bool), k=1 + tk - tq)
        scores = np.where(mask, -np.inf, scores)
    probs = special.softmax(scores, axis=-1)
    out = np.matmul(probs, v.data)

    def vjp(g):
        gv = np.matmul(np.swapaxes(probs, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = probs * (gp - np.sum(gp * probs, axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return _make(out.astype(q.dtype, copy=False), (q, k, v), vjp, "attention")


# ----------------------------------------------------------------------------
# graphs, backward pass, gradient checking
# ----------------------------------------------------------------------------

class Graph:
    """
    A model function bound to a parameter store.

    fn(params, **inputs) receives a dict of parameter leaves and the named
    inputs, and returns a Tensor or a dict of Tensors.
    """

    def __init__(self, fn, parameters, name="graph"):
        self.fn = fn
        self.parameters = parameters
        self.name = name

    def with_parameters(self, parameters):
        return Graph(self.fn, parameters, self.name)


def forward(graph, inputs=None):
    """Evaluate the graph; floating ndarray inputs become constants"""
    leaves = {name: parameter(array, name) for name, array in graph.parameters.items()}
    bound = {}
    for key, value in (inputs or {}).items():
        if isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
            bound[key] = constant(value)
        else:
            bound[key] = value
    result = graph.fn(leaves, **bound)
    if isinstance(result, Tensor):
        return {"output": result}
    return dict(result)


def topological_order(root):
    """Nodes reachable from root that carry gradients, inputs first"""
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(graph, loss):
    """Gradients of a scalar loss for every named parameter leaf"""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(topological_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.vjp is None:
                if node.name is not None:
                    grads[node.name] = grads[node.name] + g if node.name in grads else g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
    if graph is not None:
        for name, array in graph.parameters.items():
            grad = grads.get(name)
            grads[name] = np.zeros_like(array) if grad is None else np.asarray(grad, dtype=array.dtype).reshape(array.shape)
    return grads


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def failing(self):
        return {name: err for name, err in self.errors.items() if err >= self.tolerance}


def grad_check(graph, inputs=None, tolerance=1e-4, step=1e-5, output="output", max_entries=None, seed=0):
    """
    Compare backward() against central finite differences for every parameter.

    A non-scalar output is reduced with a fixed random projection. Per
    parameter the error is max|analytic - numeric| over the checked entries,
    divided by the largest gradient magnitude of that parameter.
    """
    for name, array in graph.parameters.items():
        if array.dtype != np.float64:
            raise ValueError(f"grad_check: parameter '{name}' is {array.dtype}; gradient checks need 64-bit mode")
    rng = np.random.default_rng(seed)
    reference = forward(graph, inputs)[output]
    projection = None if reference.data.size == 1 else rng.standard_normal(reference.shape)

    def loss_of(g):
        out = forward(g, inputs)[output]
        return sum_(out) if projection is None else sum_(mul(out, projection))

    analytic = backward(graph, loss_of(graph))
    report = GradCheckReport(tolerance=tolerance)
    for name, array in graph.parameters.items():
        flat_count = array.size
        if max_entries is not None and flat_count > max_entries:
            entries = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        else:
            entries = np.arange(flat_count)
        numeric = np.empty(len(entries))
        for n, entry in enumerate(entries):
            values = []
            for sign in (1.0, -1.0):
                perturbed = array.copy()
                perturbed.reshape(-1)[entry] += sign * step
                shifted = graph.with_parameters(graph.parameters.replace(name, perturbed))
                values.append(float(loss_of(shifted).data))
            numeric[n] = (values[0] - values[1]) / (2.0 * step)
        chosen = analytic[name].reshape(-1)[entries]
        scale = max(float(np.max(np.abs(analytic[name]), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
        report.errors[name] = float(np.max(np.abs(chosen - numeric), initial=0.0)) / scale
    return report
