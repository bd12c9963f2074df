"""Reverse-mode automatic differentiation over numpy arrays.

Every forward pass builds a fresh tape of ``Node`` objects; ``backward``
walks the tape once in reverse topological order and accumulates exact
gradients into ``Node.grad``. All operations also accept plain arrays or
scalars, in which case they compute with numpy directly and return an
array, so the same model code serves both the differentiable training
path and fast plain-numpy evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _any_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(grad, shape):
    """Sum a gradient down to the shape the operand had before broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """One array value in a computation graph, with links to its parents."""

    __slots__ = ("value", "grad", "op", "_parents", "_vjps")
    __array_ufunc__ = None  # keep numpy from absorbing us in mixed expressions

    def __init__(self, value, parents=(), vjps=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._vjps = tuple(vjps)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


def leaf(value):
    """Wrap an array as a graph leaf (a parameter to differentiate against)."""
    return Node(value)


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    if not _any_node(a, b):
        return out
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, s=av.shape: _unbroadcast(g, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, s=bv.shape: _unbroadcast(g, s))
    return Node(out, parents, vjps, "add")


def neg(a):
    if not isinstance(a, Node):
        return -_val(a)
    return Node(-a.value, (a,), (lambda g: -g,), "neg")


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    if not _any_node(a, b):
        return out
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s))
    return Node(out, parents, vjps, "mul")


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    if not _any_node(a, b):
        return out
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, d=bv, s=av.shape: _unbroadcast(g / d, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, n=av, d=bv, s=bv.shape: _unbroadcast(-g * n / (d * d), s))
    return Node(out, parents, vjps, "div")


def power(a, exponent):
    """Elementwise power with a constant (non-Node) exponent."""
    if isinstance(exponent, Node):
        raise TypeError("exponent must be a constant")
    c = float(exponent)
    av = _val(a)
    out = av**c
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, x=av: g * c * x ** (c - 1.0),), "pow")


def exp(a):
    av = _val(a)
    out = np.exp(av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, o=out: g * o,), "exp")


def log(a):
    av = _val(a)
    out = np.log(av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, x=av: g / x,), "log")


def sqrt(a):
    av = _val(a)
    out = np.sqrt(av)
    if not isinstance(a, Node):
        return out

    def vjp(g, o=out):
        # convention: zero subgradient where the argument is exactly zero,
        # so penalties built on sqrt stay finite at degenerate starts
        safe = np.where(o == 0.0, 1.0, o)
        return np.where(o == 0.0, 0.0, g * 0.5 / safe)

    return Node(out, (a,), (vjp,), "sqrt")


def absolute(a):
    av = _val(a)
    out = np.abs(av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, x=av: g * np.sign(x),), "abs")


def softplus(a):
    """softplus(x) = log(1 + exp(x)), computed stably."""
    av = _val(a)
    out = np.logaddexp(0.0, av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, x=av: g * expit(x),), "softplus")


def leaky_relu(a, alpha=0.01):
    """Piecewise-linear activation x -> max(x, alpha*x) for 0 < alpha < 1.

    The subgradient at exactly zero is taken from the negative branch.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    av = _val(a)
    out = np.where(av > 0.0, av, alpha * av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, x=av: g * np.where(x > 0.0, 1.0, alpha),), "leaky_relu")


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = av @ bv
    if not _any_node(a, b):
        return out
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, o=bv: g @ o.T)
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, o=av: o.T @ g)
    return Node(out, parents, vjps, "matmul")


def transpose(a):
    av = _val(a)
    out = av.T
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g: g.T,), "transpose")


def take(a, key):
    """Slice or index; the backward pass scatter-adds into the source shape."""
    av = _val(a)
    out = av[key]
    if not isinstance(a, Node):
        return out

    def vjp(g, shape=av.shape, key=key):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return z

    return Node(out, (a,), (vjp,), "take")


def reshape(a, shape):
    av = _val(a)
    out = av.reshape(shape)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, s=av.shape: g.reshape(s),), "reshape")


def concat(parts, axis=0):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _any_node(*parts):
        return out
    parents, vjps = [], []
    offset = 0
    for p, v in zip(parts, vals):
        width = v.shape[axis]
        if isinstance(p, Node):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + width)
            parents.append(p)
            vjps.append(lambda g, sl=tuple(sl): g[sl])
        offset += width
    return Node(out, parents, vjps, "concat")


def sum_(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not isinstance(a, Node):
        return out

    def vjp(g, shape=av.shape):
        if axis is None:
            return np.broadcast_to(g, shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape)

    return Node(out, (a,), (vjp,), "sum")


def mean_(a, axis=None, keepdims=False):
    av = _val(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def inverse(a):
    """Matrix inverse of a square 2-D array."""
    av = _val(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ValueError("inverse expects a square matrix")
    out = np.linalg.inv(av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), (lambda g, o=out: -o.T @ g @ o.T,), "inverse")


def gaussian_reparam(mu, rho, eps):
    """Reparameterized Gaussian draw mu + softplus(rho) * eps."""
    return add(mu, mul(softplus(rho), eps))


def backward(loss):
    """Run reverse-mode accumulation from a scalar root.

    Populates ``grad`` on every node reachable from ``loss`` and returns a
    dict mapping each leaf node to its gradient array.
    """
    if not isinstance(loss, Node):
        raise TypeError("backward expects a Node")
    if loss.value.size != 1:
        raise ValueError("backward requires a scalar root")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + contribution
    return {n: n.grad for n in topo if not n._parents and n.op == "leaf"}


@dataclass(frozen=True)
class Architecture:
    """Shape of a fully connected net taking (x, z) and emitting y.

    ``input_dim_z = 0`` describes a plain network without latent inputs.
    Weights live in one flat vector, laid out layer by layer as the
    (in_dim, out_dim) weight matrix in row-major order followed by the
    out_dim bias entries.
    """

    input_dim_x: int
    input_dim_z: int = 0
    hidden_layers: tuple = (50,)
    output_dim: int = 1
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim_x < 1:
            raise ValueError("input_dim_x must be >= 1")
        if self.input_dim_z < 0:
            raise ValueError("input_dim_z must be >= 0")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden widths must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def input_dim(self):
        return self.input_dim_x + self.input_dim_z

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden_layers, self.output_dim]

    @property
    def param_count(self):
        dims = self.layer_dims
        return sum((din + 1) * dout for din, dout in zip(dims[:-1], dims[1:]))

    def layer_slices(self):
        """Per layer: (weight slice, bias slice, in_dim, out_dim) into the flat vector."""
        out = []
        offset = 0
        dims = self.layer_dims
        for din, dout in zip(dims[:-1], dims[1:]):
            w_sl = slice(offset, offset + din * dout)
            offset += din * dout
            b_sl = slice(offset, offset + dout)
            offset += dout
            out.append((w_sl, b_sl, din, dout))
        return out

    def z_weight_mask(self):
        """Boolean mask over the flat vector marking first-layer weights fed by z."""
        mask = np.zeros(self.param_count, dtype=bool)
        if self.input_dim_z == 0:
            return mask
        w_sl, _, din, dout = self.layer_slices()[0]
        rows = np.zeros((din, dout), dtype=bool)
        rows[self.input_dim_x :, :] = True
        mask[w_sl] = rows.ravel()
        return mask


def xavier_std(fan_in, fan_out, gain=1.0):
    return gain * np.sqrt(2.0 / (fan_in + fan_out))


def xavier_normal_weights(arch, rng, gain=1.0):
    """Flat weight vector with layer-wise zero-mean normal entries.

    Each layer's weights and biases use std gain * sqrt(2 / (fan_in + fan_out)).
    """
    w = np.empty(arch.param_count)
    for w_sl, b_sl, din, dout in arch.layer_slices():
        std = xavier_std(din, dout, gain)
        w[w_sl] = rng.normal(0.0, std, din * dout)
        w[b_sl] = rng.normal(0.0, std, dout)
    return w


def _prep_inputs(arch, x, z):
    x = _val(x) if not isinstance(x, Node) else x
    single = (_val(x)).ndim == 1
    if single:
        x = reshape(x, (1, -1)) if isinstance(x, Node) else np.reshape(x, (1, -1))
        if z is not None:
            z = reshape(z, (1, -1)) if isinstance(z, Node) else np.reshape(_val(z), (1, -1))
    xv = _val(x)
    if xv.ndim != 2 or xv.shape[1] != arch.input_dim_x:
        raise ValueError(f"x must have {arch.input_dim_x} columns, got shape {xv.shape}")
    if arch.input_dim_z == 0:
        if z is not None and _val(z).size != 0:
            raise ValueError("architecture takes no latent inputs but z was given")
        z = None
    else:
        if z is None:
            raise ValueError("architecture requires latent inputs z")
        zv = _val(z)
        if zv.ndim != 2 or zv.shape != (xv.shape[0], arch.input_dim_z):
            raise ValueError(
                f"z must have shape ({xv.shape[0]}, {arch.input_dim_z}), got {zv.shape}"
            )
    return x, z, single


def mlp_forward(arch, w, x, z=None):
    """Forward pass through the network described by ``arch``.

    ``w`` is the flat weight vector; ``x`` is (N, D) or (D,); ``z`` is
    (N, K) or (K,) when the architecture has latent inputs. Any of the
    inputs may be a Node, in which case the result is a Node.
    """
    wv = _val(w)
    if wv.shape != (arch.param_count,):
        raise ValueError(f"weight vector must have length {arch.param_count}, got {wv.shape}")
    x, z, single = _prep_inputs(arch, x, z)

    h = x if z is None else concat([x, z], axis=1)
    slices = arch.layer_slices()
    for i, (w_sl, b_sl, din, dout) in enumerate(slices):
        wl = reshape(take(w, w_sl) if isinstance(w, Node) else wv[w_sl], (din, dout))
        bl = take(w, b_sl) if isinstance(w, Node) else wv[b_sl]
        h = add(matmul(h, wl), bl)
        if i < len(slices) - 1:
            h = leaky_relu(h, arch.leaky_slope)
    if single:
        h = reshape(h, (arch.output_dim,))
    return h


def mlp_forward_np(arch, w, x, z=None):
    """Plain-numpy forward pass; fast path for samplers and metrics."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (arch.param_count,):
        raise ValueError(f"weight vector must have length {arch.param_count}, got {w.shape}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
        if z is not None:
            z = np.reshape(z, (1, -1))
    if x.shape[1] != arch.input_dim_x:
        raise ValueError(f"x must have {arch.input_dim_x} columns, got shape {x.shape}")
    if arch.input_dim_z > 0:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (x.shape[0], arch.input_dim_z):
            raise ValueError(f"z must have shape ({x.shape[0]}, {arch.input_dim_z}), got {z.shape}")
        h = np.concatenate([x, z], axis=1)
    else:
        h = x
    slices = arch.layer_slices()
    alpha = arch.leaky_slope
    for i, (w_sl, b_sl, din, dout) in enumerate(slices):
        h = h @ w[w_sl].reshape(din, dout) + w[b_sl]
        if i < len(slices) - 1:
            h = np.where(h > 0.0, h, alpha * h)
    return h.reshape(arch.output_dim) if single else h
