"""Small reverse-mode differentiation engine over 2-D float64 arrays.

Every value on a :class:`Tape` is a 2-D numpy array (scalars are ``(1, 1)``).
The engine only knows the handful of primitives the networks in this package
need; dense layers are recorded as one fused node so that ordinary training
passes stay cheap.  Second derivatives are obtained by writing the first
reverse pass out as ordinary recorded ops (see :func:`input_gradient_graph`)
and differentiating that graph once more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingError, UnsupportedConfigurationError, UsageError

SMOOTH_ACTIVATIONS = ("tanh", "softplus", "identity")
ACTIVATIONS = SMOOTH_ACTIVATIONS + ("relu",)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Node:
    __slots__ = ("tape", "value", "parents", "grad_fn", "index", "requires_grad")

    def __init__(self, tape, value, parents=(), grad_fn=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops; replayed backwards exactly once."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        # filled in by :func:`forward`
        self.output = None
        self.input_node = None
        self.param_nodes = None

    def leaf(self, value, requires_grad=True):
        return Node(self, _as_2d(value), requires_grad=requires_grad)

    def const(self, value):
        return Node(self, _as_2d(value), requires_grad=False)

    def record(self, value, parents, grad_fn):
        requires = any(p.requires_grad for p in parents)
        return Node(self, value, parents, grad_fn if requires else None, requires)

    def gradients(self, output, wrt, adjoint=None):
        """Gradients of ``sum(adjoint * output)`` with respect to each node in ``wrt``.

        A tape can be replayed only once; a second call raises :class:`UsageError`.
        """
        if self.consumed:
            raise UsageError("tape already replayed; run a fresh forward pass")
        if output.tape is not self:
            raise UsageError("output node belongs to a different tape")
        self.consumed = True
        if adjoint is None:
            adjoint = np.ones_like(output.value)
        adjoint = _as_2d(adjoint)
        if adjoint.shape != output.value.shape:
            raise UsageError(f"adjoint shape {adjoint.shape} != output shape {output.value.shape}")
        grads = [None] * (output.index + 1)
        grads[output.index] = adjoint
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = nodes[i]
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                j = parent.index
                grads[j] = pg if grads[j] is None else grads[j] + pg
        out = []
        for n in wrt:
            g = grads[n.index] if n.index < len(grads) else None
            out.append(np.zeros_like(n.value) if g is None else g)
        return out


def _as_2d(value):
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a


def _lift(tape, x):
    if isinstance(x, Node):
        return x
    return tape.const(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise UsageError("op needs at least one Node argument")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# --- primitives --------------------------------------------------------------


def add(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.value.shape, b.value.shape
    return t.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.value.shape, b.value.shape
    return t.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return t.record(av * bv, (a, b), grad_fn)


def scale(a, c):
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return t.record(av @ bv, (a, b), grad_fn)


def transpose(a):
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def square(a):
    v = a.value
    return a.tape.record(v * v, (a,), lambda g: (2.0 * g * v,))


def sqrt(a):
    out = np.sqrt(a.value)
    # subgradient 0 at the origin, so norms of all-zero vectors stay differentiable
    safe = np.where(out > 0, out, np.inf)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / safe,))


def exp(a):
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a):
    v = a.value
    return a.tape.record(np.log(v), (a,), lambda g: (g / v,))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _sigmoid(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    v = a.value
    return a.tape.record(_softplus(v), (a,), lambda g: (g * _sigmoid(v),))


def minimum(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    take_a = a.value <= b.value

    def grad_fn(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), a.value.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.value.shape))

    return t.record(np.minimum(a.value, b.value), (a, b), grad_fn)


def clip(a, lo, hi):
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return a.tape.record(np.clip(v, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def sum(a, axis=None):
    v = a.value
    if axis is None:
        return a.tape.record(np.array([[v.sum()]]), (a,), lambda g: (np.full_like(v, g[0, 0]),))
    out = v.sum(axis=axis, keepdims=True)
    return a.tape.record(out, (a,), lambda g: (np.broadcast_to(g, v.shape).copy(),))


def mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(nodes, axis=1):
    t = _tape_of(*nodes)
    nodes = [_lift(t, n) for n in nodes]
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return t.record(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), grad_fn)


def columns(a, start, stop):
    v = a.value

    def grad_fn(g):
        full = np.zeros_like(v)
        full[:, start:stop] = g
        return (full,)

    return a.tape.record(v[:, start:stop], (a,), grad_fn)


def activate(a, name):
    if name == "identity":
        return a
    if name == "tanh":
        return tanh(a)
    if name == "softplus":
        return softplus(a)
    if name == "relu":
        mask = a.value > 0
        return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))
    raise ConfigurationError(f"unknown activation {name!r}")


def dense(x, w, b, activation="identity"):
    """Fused ``act(x @ w + b)`` node."""
    t = _tape_of(x, w, b)
    x, w, b = _lift(t, x), _lift(t, w), _lift(t, b)
    xv, wv = x.value, w.value
    z = xv @ wv + b.value
    if activation == "identity":
        out = z
        dz = None
    elif activation == "tanh":
        out = np.tanh(z)
        dz = 1.0 - out * out
    elif activation == "softplus":
        out = _softplus(z)
        dz = _sigmoid(z)
    elif activation == "relu":
        dz = (z > 0).astype(np.float64)
        out = z * dz
    else:
        raise ConfigurationError(f"unknown activation {activation!r}")

    def grad_fn(g):
        gz = g if dz is None else g * dz
        return (gz @ wv.T if x.requires_grad else None,
                xv.T @ gz if w.requires_grad else None,
                gz.sum(axis=0, keepdims=True) if b.requires_grad else None)

    return t.record(out, (x, w, b), grad_fn)


def softplus_value(v):
    return _softplus(v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _softplus(v):
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


# --- networks ----------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activations: tuple
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if isinstance(self.activations, str):
            object.__setattr__(self, "activations", (self.activations,) * (len(sizes) - 2))
        else:
            object.__setattr__(self, "activations", tuple(self.activations))
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        if len(self.activations) != len(sizes) - 2:
            raise ConfigurationError(
                f"{len(sizes) - 2} hidden layers but {len(self.activations)} activations")
        for act in self.activations + (self.output_activation,):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def layer_activation(self, i):
        return self.activations[i] if i < self.n_layers - 1 else self.output_activation

    @property
    def is_smooth(self):
        return all(a in SMOOTH_ACTIVATIONS for a in self.activations + (self.output_activation,))

    @classmethod
    def build(cls, in_dim, hidden, out_dim, activation="tanh"):
        hidden = tuple(hidden)
        return cls((in_dim,) + hidden + (out_dim,), (activation,) * len(hidden))


class ParamStore:
    """Named parameter matrices backed by one flat buffer, plus Adam state.

    ``store[name]`` returns a view into the flat buffer, so in-place updates of
    the flat vector are visible through every name.
    """

    def __init__(self, arrays):
        self.names = tuple(arrays)
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("duplicate parameter names")
        shapes = [_as_2d(arrays[n]).shape for n in self.names]
        sizes = [r * c for r, c in shapes]
        self.flat = np.concatenate([_as_2d(arrays[n]).ravel() for n in self.names]) if sizes \
            else np.zeros(0)
        self.shapes = dict(zip(self.names, shapes))
        self.offsets = {}
        self.views = {}
        off = 0
        for n, shp, size in zip(self.names, shapes, sizes):
            self.offsets[n] = (off, off + size)
            self.views[n] = self.flat[off:off + size].reshape(shp)
            off += size
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.step = 0

    def __getitem__(self, name):
        return self.views[name]

    def __contains__(self, name):
        return name in self.views

    def __iter__(self):
        return iter(self.names)

    def __len__(self):
        return len(self.names)

    def items(self):
        return ((n, self.views[n]) for n in self.names)

    def to_dict(self):
        return {n: self.views[n].copy() for n in self.names}

    def copy(self):
        """Deep copy including optimizer state."""
        new = ParamStore(self.to_dict())
        new.m[:] = self.m
        new.v[:] = self.v
        new.step = self.step
        return new

    def fresh_copy(self):
        """Copy of the weights with zeroed optimizer state."""
        return ParamStore(self.to_dict())

    def load(self, other):
        """Overwrite weights (not optimizer state) with ``other``'s."""
        if other.names != self.names:
            raise UsageError("parameter stores have different layouts")
        self.flat[:] = other.flat

    def nodes(self, tape, requires_grad=True):
        return {n: tape.leaf(self.views[n], requires_grad) for n in self.names}

    def flatten(self, grads):
        missing = [n for n in self.names if n not in grads]
        if missing:
            raise UsageError(f"gradients missing for {missing}")
        out = np.empty_like(self.flat)
        for n in self.names:
            lo, hi = self.offsets[n]
            out[lo:hi] = np.ravel(grads[n])
        return out


def init_mlp(spec, rng, prefix=""):
    """Glorot-uniform weights and zero biases as a ``{name: array}`` dict."""
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = np.zeros((1, fan_out))
    return params


def check_shapes(spec, params, prefix=""):
    for i in range(spec.n_layers):
        want_w = (spec.layer_sizes[i], spec.layer_sizes[i + 1])
        want_b = (1, spec.layer_sizes[i + 1])
        for name, want in ((f"{prefix}W{i}", want_w), (f"{prefix}b{i}", want_b)):
            if name not in params:
                raise ConfigurationError(f"layer {i}: missing parameter {name}")
            got = np.shape(params[name])
            if tuple(got) != want:
                raise ConfigurationError(f"layer {i}: {name} has shape {tuple(got)}, expected {want}")


def mlp(spec, pnodes, x, prefix=""):
    """Record an MLP pass on ``x``'s tape using parameter nodes ``pnodes``."""
    h = x
    for i in range(spec.n_layers):
        h = dense(h, pnodes[f"{prefix}W{i}"], pnodes[f"{prefix}b{i}"], spec.layer_activation(i))
    return h


def mlp_value(spec, params, x, prefix=""):
    """Plain numpy evaluation, no tape."""
    h = _as_2d(x)
    for i in range(spec.n_layers):
        z = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        act = spec.layer_activation(i)
        if act == "tanh":
            h = np.tanh(z)
        elif act == "softplus":
            h = _softplus(z)
        elif act == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h


def forward(spec, params, x):
    """Run the MLP on ``x`` and return ``(output, tape)``."""
    x = _as_2d(x)
    if x.shape[1] != spec.in_dim:
        raise ConfigurationError(f"layer 0: input has {x.shape[1]} columns, expected {spec.in_dim}")
    check_shapes(spec, params)
    tape = Tape()
    tape.input_node = tape.leaf(x)
    tape.param_nodes = {n: tape.leaf(params[n]) for n in params}
    tape.output = mlp(spec, tape.param_nodes, tape.input_node)
    return tape.output.value, tape


def backward(tape, output_adjoint):
    """Replay a :func:`forward` tape; returns ``(param_grads, input_grad)``."""
    if tape.output is None:
        raise UsageError("tape was not produced by forward()")
    names = list(tape.param_nodes)
    wrt = [tape.param_nodes[n] for n in names] + [tape.input_node]
    grads = tape.gradients(tape.output, wrt, output_adjoint)
    return dict(zip(names, grads[:-1])), grads[-1]


def _activation_slope(z, name):
    if name == "identity":
        return None
    if name == "tanh":
        return 1.0 - square(tanh(z))
    if name == "softplus":
        return sigmoid(z)
    raise UnsupportedConfigurationError(
        f"activation {name!r} is not twice differentiable; input-gradient penalties need tanh/softplus")


def input_gradient_graph(spec, pnodes, x, prefix=""):
    """Record ``f(x)`` and ``d f / d x`` for a scalar-output MLP as ordinary ops.

    The input gradient comes out as a node, so differentiating any function of
    it with respect to the parameters is a second reverse pass through the first.
    """
    if spec.out_dim != 1:
        raise ConfigurationError("input-gradient graph needs a scalar-output network")
    if not spec.is_smooth:
        bad = [a for a in spec.activations + (spec.output_activation,) if a not in SMOOTH_ACTIVATIONS]
        raise UnsupportedConfigurationError(
            f"activation {bad[0]!r} is not twice differentiable; input-gradient penalties need tanh/softplus")
    tape = x.tape
    pre = []
    h = x
    for i in range(spec.n_layers):
        z = add(matmul(h, pnodes[f"{prefix}W{i}"]), pnodes[f"{prefix}b{i}"])
        pre.append(z)
        h = activate(z, spec.layer_activation(i))
    g = tape.const(np.ones((x.value.shape[0], 1)))
    for i in range(spec.n_layers - 1, -1, -1):
        slope = _activation_slope(pre[i], spec.layer_activation(i))
        if slope is not None:
            g = mul(g, slope)
        g = matmul(g, transpose(pnodes[f"{prefix}W{i}"]))
    return h, g


def input_gradient_norm_grad(spec, params, x):
    """Input-gradient norms of a scalar MLP and the parameter gradient of the penalty.

    Returns ``(norms, penalty, grads)`` where ``norms[i] = ||d f / d x_i||_2``,
    ``penalty = mean((norms - 1)^2)`` and ``grads`` maps parameter names to the
    exact derivative of ``penalty``.
    """
    check_shapes(spec, params)
    tape = Tape()
    pnodes = {n: tape.leaf(params[n]) for n in params}
    xn = tape.const(x)
    _, g = input_gradient_graph(spec, pnodes, xn)
    norms = sqrt(sum(square(g), axis=1))
    penalty = mean(square(norms - 1.0))
    names = list(pnodes)
    grads = tape.gradients(penalty, [pnodes[n] for n in names])
    return norms.value.ravel(), float(penalty.value[0, 0]), dict(zip(names, grads))


def adam_step(params, grads, lr, max_grad_norm=None):
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    g = grads if isinstance(grads, np.ndarray) and grads.ndim == 1 else params.flatten(grads)
    if not np.all(np.isfinite(g)):
        for n in params.names:
            lo, hi = params.offsets[n]
            if not np.all(np.isfinite(g[lo:hi])):
                raise TrainingError(f"non-finite gradient for parameter {n!r}")
    if max_grad_norm is not None:
        norm = np.sqrt(g @ g)
        if norm > max_grad_norm:
            g = g * (max_grad_norm / norm)
    params.step += 1
    t = params.step
    params.m *= ADAM_BETA1
    params.m += (1.0 - ADAM_BETA1) * g
    params.v *= ADAM_BETA2
    params.v += (1.0 - ADAM_BETA2) * (g * g)
    step = lr * np.sqrt(1.0 - ADAM_BETA2 ** t) / (1.0 - ADAM_BETA1 ** t)
    # equivalent to lr * mhat / (sqrt(vhat) + eps) with eps rescaled
    params.flat -= step * params.m / (np.sqrt(params.v) + ADAM_EPS * np.sqrt(1.0 - ADAM_BETA2 ** t))
    return params
