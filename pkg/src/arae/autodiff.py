"""Dense fp64 tensors with a reverse-mode tape, optimizers, and weight clipping.

Everything trains in float64 so that finite-difference gradient checks are
meaningful. A Tape records every primitive application in topological order;
backward() walks it once in reverse. There is no global state: each forward
pass owns its Tape, which makes read-only inference safe across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """Operands of a primitive do not have compatible shapes."""

    def __init__(self, kind, shape_a, shape_b):
        super().__init__(f"{kind}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.kind = kind


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


class MaskError(ValueError):
    """A cross-entropy mask selects no positions."""


class Tensor:
    """Immutable dense fp64 array. `values` is the flat row-major view."""

    __slots__ = ("array",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @property
    def shape(self):
        return self.array.shape

    @property
    def values(self):
        return self.array.reshape(-1)

    @property
    def size(self):
        return self.array.size

    @staticmethod
    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float64))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _as_array(x):
    if isinstance(x, Node):
        return x.value
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


class Node:
    """One entry on a Tape: a leaf or the output of a primitive application."""

    __slots__ = ("id", "kind", "inputs", "value", "static", "saved", "name")

    def __init__(self, nid, kind, inputs, value, static=None, saved=None, name=None):
        self.id = nid
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.static = static
        self.saved = saved
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def tensor(self):
        return Tensor(self.value)


class Tape:
    """Ordered record of primitive applications, replayable deterministically.

    Nodes are appended in creation order, so the list is topologically sorted
    by construction and every node id is produced exactly once.
    """

    def __init__(self):
        self.nodes = []
        self._param_nodes = {}

    def _add(self, kind, inputs, value, static=None, saved=None, name=None):
        value = np.asarray(value, dtype=np.float64, order="C")
        if kind != "leaf" and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        value.setflags(write=False)
        node = Node(len(self.nodes), kind, inputs, value, static, saved, name)
        self.nodes.append(node)
        return node

    def leaf(self, data, name=None):
        return self._add("leaf", (), _as_array(data), name=name)

    def constant(self, data):
        return self.leaf(data)

    def param(self, name, tensor):
        """Leaf for a named parameter; one node per name per tape."""
        node = self._param_nodes.get(name)
        if node is None:
            node = self.leaf(tensor, name=name)
            self._param_nodes[name] = node
        return node

    def param_nodes(self):
        return dict(self._param_nodes)

    def replay(self):
        """Recompute every non-leaf value from the leaves.

        Returns a list aligned with `nodes` (None for leaves) for
        bitwise comparison against the recorded values.
        """
        recomputed = {}
        out = []
        for node in self.nodes:
            if node.kind == "leaf":
                recomputed[node.id] = node.value
                out.append(None)
                continue
            ins = [recomputed[i.id] for i in node.inputs]
            value, _ = _FORWARD[node.kind](ins, node.static)
            recomputed[node.id] = value
            out.append(value)
        return out


# ---------------------------------------------------------------------------
# forward kernels: (input arrays, static aux) -> (output array, saved aux)


def _fwd_matmul(ins, static):
    return ins[0] @ ins[1], None


def _fwd_add(ins, static):
    return ins[0] + ins[1], None


def _fwd_add_bias(ins, static):
    return ins[0] + ins[1][None, :], None


def _fwd_mul(ins, static):
    return ins[0] * ins[1], None


def _fwd_concat(ins, static):
    return np.concatenate([ins[0], ins[1]], axis=-1), None


def _fwd_tanh(ins, static):
    y = np.tanh(ins[0])
    return y, y


def _fwd_sigmoid(ins, static):
    y = 1.0 / (1.0 + np.exp(-ins[0]))
    return y, y


def _fwd_relu(ins, static):
    return np.maximum(ins[0], 0.0), None


def _fwd_scale(ins, static):
    return ins[0] * static, None


def _fwd_sum_all(ins, static):
    return np.asarray(ins[0].sum()), None


def _fwd_slice_last(ins, static):
    start, stop = static
    return np.ascontiguousarray(ins[0][..., start:stop]), None


def _fwd_embed(ins, static):
    return ins[0][static], None


def stable_softmax(logits):
    """Rowwise softmax with max-subtraction; safe for temperature-scaled logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_weighted_ce(ins, static):
    targets, weights = static
    logits = ins[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(len(targets)), targets]
    return np.asarray((weights * nll).sum()), stable_softmax(logits)


def _fwd_l2norm_rows(ins, static):
    x = ins[0]
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(r == 0.0):
        raise NonFiniteError("l2norm_rows: zero-norm row cannot be normalized")
    y = x / r
    return y, (y, r)


def _fwd_lstm_cell(ins, static):
    x, h_prev, c_prev, wx, wh, b = ins
    mask = static
    hidden = h_prev.shape[-1]
    # one fused gemm over [x | h_prev] beats two skinny ones
    pre = np.concatenate([x, h_prev], axis=-1) @ np.concatenate([wx, wh], axis=0) + b[None, :]
    i = 1.0 / (1.0 + np.exp(-pre[:, :hidden]))
    f = 1.0 / (1.0 + np.exp(-pre[:, hidden : 2 * hidden]))
    g = np.tanh(pre[:, 2 * hidden : 3 * hidden])
    o = 1.0 / (1.0 + np.exp(-pre[:, 3 * hidden :]))
    c_cell = f * c_prev + i * g
    tc = np.tanh(c_cell)
    h_cell = o * tc
    if mask is None:
        h_out, c_out = h_cell, c_cell
    else:
        keep = 1.0 - mask
        h_out = mask * h_cell + keep * h_prev
        c_out = mask * c_cell + keep * c_prev
    return np.concatenate([h_out, c_out], axis=-1), (i, f, g, o, tc)


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "add_bias": _fwd_add_bias,
    "mul_elementwise": _fwd_mul,
    "concat_lastdim": _fwd_concat,
    "tanh": _fwd_tanh,
    "sigmoid": _fwd_sigmoid,
    "relu": _fwd_relu,
    "scale": _fwd_scale,
    "sum_all": _fwd_sum_all,
    "slice_lastdim": _fwd_slice_last,
    "embed_rows": _fwd_embed,
    "weighted_ce": _fwd_weighted_ce,
    "l2norm_rows": _fwd_l2norm_rows,
    "lstm_cell": _fwd_lstm_cell,
}


# ---------------------------------------------------------------------------
# backward rules: (node, upstream grad) -> list of grads aligned with inputs


def _bwd_matmul(node, g):
    a, b = node.inputs[0].value, node.inputs[1].value
    return [g @ b.T, a.T @ g]


def _bwd_add(node, g):
    return [g, g]


def _bwd_add_bias(node, g):
    return [g, g.sum(axis=0)]


def _bwd_mul(node, g):
    a, b = node.inputs[0].value, node.inputs[1].value
    return [g * b, g * a]


def _bwd_concat(node, g):
    p = node.inputs[0].value.shape[-1]
    return [np.ascontiguousarray(g[..., :p]), np.ascontiguousarray(g[..., p:])]


def _bwd_tanh(node, g):
    y = node.saved
    return [g * (1.0 - y * y)]


def _bwd_sigmoid(node, g):
    y = node.saved
    return [g * y * (1.0 - y)]


def _bwd_relu(node, g):
    return [g * (node.inputs[0].value > 0.0)]


def _bwd_scale(node, g):
    return [g * node.static]


def _bwd_sum_all(node, g):
    return [np.broadcast_to(g, node.inputs[0].value.shape)]


def _bwd_slice_last(node, g):
    start, stop = node.static
    out = np.zeros_like(node.inputs[0].value)
    out[..., start:stop] = g
    return [out]


def _bwd_embed(node, g):
    out = np.zeros_like(node.inputs[0].value)
    np.add.at(out, node.static, g)
    return [out]


def _bwd_weighted_ce(node, g):
    targets, weights = node.static
    probs = node.saved.copy()
    probs[np.arange(len(targets)), targets] -= 1.0
    return [float(g) * weights[:, None] * probs]


def _bwd_l2norm_rows(node, g):
    y, r = node.saved
    return [(g - y * (g * y).sum(axis=-1, keepdims=True)) / r]


def _bwd_lstm_cell(node, g):
    x, h_prev, c_prev, wx, wh, _b = (n.value for n in node.inputs)
    i, f, gate_g, o, tc = node.saved
    mask = node.static
    hidden = h_prev.shape[-1]
    gh, gc = g[:, :hidden], g[:, hidden:]
    if mask is None:
        gh_cell, gc_cell = gh, gc
        gh_prev_direct = gc_prev_direct = 0.0
    else:
        keep = 1.0 - mask
        gh_cell, gc_cell = gh * mask, gc * mask
        gh_prev_direct, gc_prev_direct = gh * keep, gc * keep
    do = gh_cell * tc
    dc = gc_cell + gh_cell * o * (1.0 - tc * tc)
    di = dc * gate_g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f + gc_prev_direct
    d_pre = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - gate_g * gate_g), do * o * (1.0 - o)],
        axis=-1,
    )
    in_dim = x.shape[-1]
    d_in = d_pre @ np.concatenate([wx, wh], axis=0).T
    dw = np.concatenate([x, h_prev], axis=-1).T @ d_pre
    dx = d_in[:, :in_dim]
    dh_prev = d_in[:, in_dim:] + gh_prev_direct
    return [dx, dh_prev, dc_prev, dw[:in_dim], dw[in_dim:], d_pre.sum(axis=0)]


_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "add_bias": _bwd_add_bias,
    "mul_elementwise": _bwd_mul,
    "concat_lastdim": _bwd_concat,
    "tanh": _bwd_tanh,
    "sigmoid": _bwd_sigmoid,
    "relu": _bwd_relu,
    "scale": _bwd_scale,
    "sum_all": _bwd_sum_all,
    "slice_lastdim": _bwd_slice_last,
    "embed_rows": _bwd_embed,
    "weighted_ce": _bwd_weighted_ce,
    "l2norm_rows": _bwd_l2norm_rows,
    "lstm_cell": _bwd_lstm_cell,
}


# ---------------------------------------------------------------------------
# op constructors


def _node_of(tape, x):
    return x if isinstance(x, Node) else tape.leaf(x)


def _push(tape, kind, inputs, static=None):
    value, saved = _FORWARD[kind]([n.value for n in inputs], static)
    node = tape._add(kind, tuple(inputs), value, static, saved)
    return node


def matmul(tape, a, b):
    a, b = _node_of(tape, a), _node_of(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return _push(tape, "matmul", [a, b])


def add(tape, a, b):
    a, b = _node_of(tape, a), _node_of(tape, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("add", a.shape, b.shape)
    return _push(tape, "add", [a, b])


def add_bias(tape, a, b):
    a, b = _node_of(tape, a), _node_of(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("add_bias", a.shape, b.shape)
    return _push(tape, "add_bias", [a, b])


def mul_elementwise(tape, a, b):
    a, b = _node_of(tape, a), _node_of(tape, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mul_elementwise", a.shape, b.shape)
    return _push(tape, "mul_elementwise", [a, b])


def concat_lastdim(tape, a, b):
    a, b = _node_of(tape, a), _node_of(tape, b)
    if a.value.ndim != b.value.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatchError("concat_lastdim", a.shape, b.shape)
    return _push(tape, "concat_lastdim", [a, b])


def tanh(tape, a):
    return _push(tape, "tanh", [_node_of(tape, a)])


def sigmoid(tape, a):
    return _push(tape, "sigmoid", [_node_of(tape, a)])


def relu(tape, a):
    return _push(tape, "relu", [_node_of(tape, a)])


def scale(tape, a, alpha):
    return _push(tape, "scale", [_node_of(tape, a)], static=float(alpha))


def sum_all(tape, a):
    return _push(tape, "sum_all", [_node_of(tape, a)])


def slice_lastdim(tape, a, start, stop):
    a = _node_of(tape, a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeMismatchError("slice_lastdim", a.shape, (start, stop))
    return _push(tape, "slice_lastdim", [a], static=(int(start), int(stop)))


def embed_rows(tape, table, ids):
    table = _node_of(tape, table)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embed_rows: id out of range for table with {table.shape[0]} rows"
        )
    return _push(tape, "embed_rows", [table], static=ids)


def weighted_ce(tape, logits, targets, weights):
    """Sum over rows of weights[i] * (-ln softmax(logits[i])[targets[i]])."""
    logits = _node_of(tape, logits)
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.value.ndim != 2 or targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
        raise ShapeMismatchError("weighted_ce", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError(f"weighted_ce: target id out of range for vocab {logits.shape[1]}")
    return _push(tape, "weighted_ce", [logits], static=(targets, weights))


def l2norm_rows(tape, a):
    return _push(tape, "l2norm_rows", [_node_of(tape, a)])


def lstm_cell(tape, x, h_prev, c_prev, wx, wh, b, mask=None):
    """Fused LSTM cell (gate order input, forget, cell-candidate, output).

    Returns a [batch x 2*hidden] node laid out as h | c. When `mask` is given
    (a constant [batch x 1] 0/1 array), masked-out rows carry the previous
    state through unchanged.
    """
    nodes = [_node_of(tape, v) for v in (x, h_prev, c_prev, wx, wh, b)]
    x_n, h_n, c_n, wx_n, wh_n, b_n = nodes
    hidden = h_n.shape[-1]
    if wx_n.shape != (x_n.shape[-1], 4 * hidden) or wh_n.shape != (hidden, 4 * hidden):
        raise ShapeMismatchError("lstm_cell", wx_n.shape, wh_n.shape)
    if b_n.shape != (4 * hidden,) or c_n.shape != h_n.shape:
        raise ShapeMismatchError("lstm_cell", b_n.shape, c_n.shape)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    return _push(tape, "lstm_cell", nodes, static=mask)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul_elementwise": mul_elementwise,
    "concat_lastdim": concat_lastdim,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "scale": scale,
}


def apply_primitive(tape, kind, *operands, alpha=None):
    """Apply one of the public primitive kinds, recording it on `tape`."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind: {kind!r}")
    if kind == "scale":
        return scale(tape, operands[0], alpha)
    return _PRIMITIVES[kind](tape, *operands)


def softmax_cross_entropy(tape, logits, targets, mask):
    """Mean over masked positions of -ln softmax(logits_t)[target_t].

    `logits` is [steps x vocab]; `mask` is a 0/1 sequence of length steps.
    Numerically stabilized by max-subtraction before exponentiation.
    """
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total == 0:
        raise MaskError("softmax_cross_entropy: mask selects no positions")
    return weighted_ce(tape, logits, targets, mask / total)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss, tape):
    """Gradient of a scalar loss w.r.t. every named parameter on the tape.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    adjoint = {loss.id: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        if node.kind == "leaf":
            continue
        g = adjoint.pop(node.id, None)
        if g is None:
            continue
        for inp, gin in zip(node.inputs, _BACKWARD[node.kind](node, g)):
            acc = adjoint.get(inp.id)
            adjoint[inp.id] = gin if acc is None else acc + gin
    grads = {}
    for name, node in tape._param_nodes.items():
        g = adjoint.get(node.id)
        grads[name] = Tensor(g) if g is not None else Tensor.zeros(node.shape)
    return grads


# ---------------------------------------------------------------------------
# parameters and optimizers


class ParamStore:
    """Ordered map from dot-separated parameter names to Tensors.

    Iteration order equals insertion order; the checkpoint layout depends on
    it. Also holds one optimizer-state slot per parameter (rmsprop moments).
    """

    def __init__(self):
        self._tensors = {}
        self.state = {}

    def add(self, name, tensor):
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        self._tensors[name] = tensor if isinstance(tensor, Tensor) else Tensor(tensor)

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, tensor):
        tensor = tensor if isinstance(tensor, Tensor) else Tensor(tensor)
        if name in self._tensors and self._tensors[name].shape != tensor.shape:
            raise ShapeMismatchError("param_update", self._tensors[name].shape, tensor.shape)
        self._tensors[name] = tensor

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self):
        out = ParamStore()
        out._tensors = dict(self._tensors)
        out.state = {k: v.copy() for k, v in self.state.items()}
        return out

    def with_param(self, name, tensor):
        out = self.copy()
        out[name] = tensor
        return out

    def subset(self, grads):
        """The entries of a gradient map that belong to this store."""
        return {k: v for k, v in grads.items() if k in self._tensors}


@dataclass
class OptimConfig:
    algorithm: str = "gd"  # "gd" (plain gradient descent) or "rmsprop"
    learning_rate: float = 0.1
    rmsprop_decay: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("gd", "rmsprop"):
            raise ValueError(f"unknown optimizer algorithm {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ValueError("rmsprop_decay must lie in (0, 1)")


def optimizer_step(store, grads, cfg):
    """One update step; parameters without a gradient entry stay unchanged."""
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        theta = store[name].array
        garr = g.array if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if garr.shape != theta.shape:
            raise ShapeMismatchError("optimizer_step", theta.shape, garr.shape)
        if cfg.algorithm == "gd":
            store[name] = Tensor(theta - cfg.learning_rate * garr)
        else:
            s = store.state.get(name)
            if s is None:
                s = np.zeros_like(theta)
            s = cfg.rmsprop_decay * s + (1.0 - cfg.rmsprop_decay) * garr * garr
            store.state[name] = s
            store[name] = Tensor(theta - cfg.learning_rate * garr / (np.sqrt(s) + cfg.epsilon))
    return store


def clip_weights(store, bound):
    """Clamp every component of every parameter into [-bound, +bound]."""
    if bound <= 0:
        raise ValueError("clip bound must be > 0")
    for name, tensor in store.items():
        store[name] = Tensor(np.clip(tensor.array, -bound, bound))
    return store


def gradient_check(f, params, epsilon=1e-5):
    """Max relative error between backward() and central finite differences.

    `f` maps a ParamStore to a (scalar loss node, tape) pair and must be
    deterministic. Every component of every parameter in `params` is
    perturbed by +/- epsilon.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    loss, tape = f(params)
    if not np.isfinite(loss.value):
        raise NonFiniteError("gradient_check: loss is not finite")
    analytic = backward(loss, tape)
    def eval_at(store):
        val, _ = f(store)
        if not np.isfinite(val.value):
            raise NonFiniteError("gradient_check: perturbed loss is not finite")
        return float(val.value)

    worst = 0.0
    for name, tensor in params.items():
        a = analytic[name].values if name in analytic else np.zeros(tensor.size)
        base = tensor.array
        for idx in range(base.size):
            hi = base.copy()
            hi.reshape(-1)[idx] += epsilon
            lo = base.copy()
            lo.reshape(-1)[idx] -= epsilon
            numeric = (
                eval_at(params.with_param(name, Tensor(hi)))
                - eval_at(params.with_param(name, Tensor(lo)))
            ) / (2.0 * epsilon)
            err = abs(a[idx] - numeric) / max(abs(a[idx]), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
