"""Reverse-mode differentiation over small static computation graphs.

The engine covers exactly the primitives the subband source model needs:
affine maps, a causal convolution over the frame axis, a gated recurrent
cell (single-step and fused full-sequence scan), a handful of elementwise
nonlinearities, tensor plumbing (add/mul/concat/slice/reshape), the
logistic log-density, and a full reduction. Graphs are built once with
:class:`GraphBuilder` and then evaluated/differentiated repeatedly;
evaluation state lives entirely in per-call dictionaries, so shared graphs
are safe to use from concurrent callers.

Backward rules propagate exact gradients; the recurrent ops backpropagate
through time across the whole evaluated sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs, shape mismatches, or bad gradient requests."""


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, key):
        for k, v in self.attrs:
            if k == key:
                return v
        raise KeyError(key)


@dataclass(frozen=True)
class Graph:
    """An acyclic list of operation records in topological order."""

    nodes: tuple[Node, ...]
    outputs: tuple[str, ...]

    def __post_init__(self):
        seen = set()
        for node in self.nodes:
            for ref in node.inputs:
                if ref not in seen:
                    raise GraphError(f"node {node.name!r} references unknown id {ref!r}")
            if node.name in seen:
                raise GraphError(f"duplicate node name {node.name!r}")
            seen.add(node.name)
        for out in self.outputs:
            if out not in seen:
                raise GraphError(f"output {out!r} is not a node")

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if n.op == "input")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _fold(x):
    return x.reshape(-1, x.shape[-1])


# --- op registry -----------------------------------------------------------
# forward(attrs, *inputs) -> (value, aux)
# backward(attrs, grad, aux, value, *inputs) -> tuple of input gradients

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _op(name):
    def register(pair):
        _OPS[name] = pair
        return pair
    return register


def _affine_fwd(attrs, x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise GraphError(f"affine: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b, None


def _affine_bwd(attrs, g, aux, y, x, w, b):
    return g @ w.T, _fold(x).T @ _fold(g), _fold(g).sum(axis=0)


_op("affine")((_affine_fwd, _affine_bwd))


def _causal_conv_fwd(attrs, x, k, b):
    # x (B, N, C); k (L, C, H); y[:, n] = b + sum_j x[:, n-j] @ k[j-1]
    if x.ndim != 3 or k.ndim != 3 or x.shape[-1] != k.shape[1]:
        raise GraphError(f"causal_conv: incompatible shapes {x.shape} and {k.shape}")
    lags, _, h = k.shape
    n = x.shape[1]
    y = np.broadcast_to(b, x.shape[:2] + (h,)).copy()
    for j in range(1, lags + 1):
        if j >= n + 1:
            break
        y[:, j:] += x[:, :n - j] @ k[j - 1]
    return y, None


def _causal_conv_bwd(attrs, g, aux, y, x, k, b):
    lags = k.shape[0]
    n = x.shape[1]
    dx = np.zeros_like(x)
    dk = np.zeros_like(k)
    for j in range(1, lags + 1):
        if j >= n + 1:
            break
        dx[:, :n - j] += g[:, j:] @ k[j - 1].T
        dk[j - 1] = np.einsum("bnc,bnh->ch", x[:, :n - j], g[:, j:], optimize=True)
    return dx, dk, g.sum(axis=(0, 1))


_op("causal_conv")((_causal_conv_fwd, _causal_conv_bwd))


def _gru_parts(ax, ah, h):
    hdim = h.shape[-1]
    z = _sigmoid(ax[..., :hdim] + ah[..., :hdim])
    r = _sigmoid(ax[..., hdim:2 * hdim] + ah[..., hdim:2 * hdim])
    c = np.tanh(ax[..., 2 * hdim:] + r * ah[..., 2 * hdim:])
    h_new = (1.0 - z) * h + z * c
    return z, r, c, h_new


def _gru_cell_fwd(attrs, x, h, wx, wh, b):
    if wx.shape[1] != 3 * h.shape[-1] or wh.shape[0] != h.shape[-1]:
        raise GraphError("gru_cell: weight shapes inconsistent with state dim")
    ax = x @ wx + b
    ah = h @ wh
    z, r, c, h_new = _gru_parts(ax, ah, h)
    return h_new, (z, r, c, ah)


def _gru_cell_grads(g, z, r, c, ah_c, h_prev):
    """Shared single-step backward; returns (da_x, da_h, dh_prev_direct)."""
    dz = g * (c - h_prev)
    dc = g * z
    da_c = dc * (1.0 - c * c)
    dr = da_c * ah_c
    dah_c = da_c * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    da_x = np.concatenate([da_z, da_r, da_c], axis=-1)
    da_h = np.concatenate([da_z, da_r, dah_c], axis=-1)
    return da_x, da_h, g * (1.0 - z)


def _gru_cell_bwd(attrs, g, aux, y, x, h, wx, wh, b):
    z, r, c, ah = aux
    hdim = h.shape[-1]
    da_x, da_h, dh_direct = _gru_cell_grads(g, z, r, c, ah[..., 2 * hdim:], h)
    dx = da_x @ wx.T
    dh = dh_direct + da_h @ wh.T
    return dx, dh, _fold(x).T @ _fold(da_x), _fold(h).T @ _fold(da_h), _fold(da_x).sum(axis=0)


_op("gru_cell")((_gru_cell_fwd, _gru_cell_bwd))


def _gru_sequence_fwd(attrs, x, h0, wx, wh, b):
    # x (B, N, F) -> h sequence (B, N, H); input projection hoisted out of the scan
    if x.ndim != 3:
        raise GraphError(f"gru_sequence: expected (B, N, F) input, got {x.shape}")
    bsz, n, _ = x.shape
    hdim = h0.shape[-1]
    ax_all = x @ wx + b
    hseq = np.empty((bsz, n, hdim), dtype=x.dtype)
    zs = np.empty_like(hseq)
    rs = np.empty_like(hseq)
    cs = np.empty_like(hseq)
    ahc = np.empty_like(hseq)
    h = h0
    for i in range(n):
        ah = h @ wh
        z, r, c, h = _gru_parts(ax_all[:, i], ah, h)
        zs[:, i], rs[:, i], cs[:, i], ahc[:, i] = z, r, c, ah[:, 2 * hdim:]
        hseq[:, i] = h
    return hseq, (zs, rs, cs, ahc)


def _gru_sequence_bwd(attrs, g, aux, hseq, x, h0, wx, wh, b):
    zs, rs, cs, ahc = aux
    bsz, n, hdim = hseq.shape
    da_x_all = np.empty((bsz, n, 3 * hdim), dtype=g.dtype)
    da_h_all = np.empty_like(da_x_all)
    dh = np.zeros_like(h0)
    for i in range(n - 1, -1, -1):
        h_prev = hseq[:, i - 1] if i > 0 else h0
        da_x, da_h, dh_direct = _gru_cell_grads(
            g[:, i] + dh, zs[:, i], rs[:, i], cs[:, i], ahc[:, i], h_prev
        )
        da_x_all[:, i] = da_x
        da_h_all[:, i] = da_h
        dh = dh_direct + da_h @ wh.T
    h_prev_seq = np.concatenate([h0[:, None, :], hseq[:, :-1]], axis=1)
    dwx = _fold(x).T @ _fold(da_x_all)
    dwh = _fold(h_prev_seq).T @ _fold(da_h_all)
    return da_x_all @ wx.T, dh, dwx, dwh, _fold(da_x_all).sum(axis=0)


_op("gru_sequence")((_gru_sequence_fwd, _gru_sequence_bwd))

_op("relu")((
    lambda attrs, x: (np.maximum(x, 0.0), None),
    lambda attrs, g, aux, y, x: (g * (x > 0),),
))
_op("tanh")((
    lambda attrs, x: (np.tanh(x), None),
    lambda attrs, g, aux, y, x: (g * (1.0 - y * y),),
))
_op("sin")((
    lambda attrs, x: (np.sin(x), None),
    lambda attrs, g, aux, y, x: (g * np.cos(x),),
))
_op("cos")((
    lambda attrs, x: (np.cos(x), None),
    lambda attrs, g, aux, y, x: (-g * np.sin(x),),
))


def _softplus_fwd(attrs, x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0), None


_op("softplus")((
    _softplus_fwd,
    lambda attrs, g, aux, y, x: (g * _sigmoid(x),),
))


def _binary_shapes(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise GraphError(f"incompatible shapes {a.shape} and {b.shape}") from exc


def _add_fwd(attrs, a, b):
    _binary_shapes(a, b)
    return a + b, None


_op("add")((
    _add_fwd,
    lambda attrs, g, aux, y, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
))


def _mul_fwd(attrs, a, b):
    _binary_shapes(a, b)
    return a * b, None


_op("mul")((
    _mul_fwd,
    lambda attrs, g, aux, y, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
))

_op("scale")((
    lambda attrs, x: (dict(attrs)["factor"] * x, None),
    lambda attrs, g, aux, y, x: (dict(attrs)["factor"] * g,),
))


def _concat_fwd(attrs, *xs):
    return np.concatenate(xs, axis=dict(attrs)["axis"]), None


def _concat_bwd(attrs, g, aux, y, *xs):
    axis = dict(attrs)["axis"]
    sizes = [x.shape[axis] for x in xs]
    return tuple(np.split(g, np.cumsum(sizes[:-1]), axis=axis))


_op("concat")((_concat_fwd, _concat_bwd))


def _slice_fwd(attrs, x):
    a = dict(attrs)
    sl = [slice(None)] * x.ndim
    sl[a["axis"]] = slice(a["start"], a["stop"])
    return x[tuple(sl)], None


def _slice_bwd(attrs, g, aux, y, x):
    a = dict(attrs)
    dx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[a["axis"]] = slice(a["start"], a["stop"])
    dx[tuple(sl)] = g
    return (dx,)


_op("slice")((_slice_fwd, _slice_bwd))

_op("reshape")((
    lambda attrs, x: (x.reshape(dict(attrs)["shape"]), None),
    lambda attrs, g, aux, y, x: (g.reshape(x.shape),),
))


def _log_cosh(u):
    return np.abs(u) + np.log1p(np.exp(-2.0 * np.abs(u))) - np.log(2.0)


def _logistic_fwd(attrs, x, mu, s):
    u = (x - mu) / (2.0 * s)
    return -np.log(4.0 * s) - 2.0 * _log_cosh(u), u


def _logistic_bwd(attrs, g, aux, y, x, mu, s):
    u = aux
    t = np.tanh(u)
    dx = -g * t / s
    return dx, -dx, g * (2.0 * u * t - 1.0) / s


_op("logistic_log_density")((_logistic_fwd, _logistic_bwd))

_op("reduce_sum")((
    lambda attrs, x: (np.asarray(x.sum(), dtype=x.dtype), None),
    lambda attrs, g, aux, y, x: (np.full(x.shape, g, dtype=x.dtype),),
))


class GraphBuilder:
    """Incrementally assembles a :class:`Graph`; node handles are names."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._names: set[str] = set()

    def _register(self, op: str, inputs: Sequence[str], attrs=(), name=None) -> str:
        if name is None:
            name = f"{op}_{len(self._nodes)}"
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        for ref in inputs:
            if ref not in self._names:
                raise GraphError(f"unknown input {ref!r} for node {name!r}")
        if op != "input" and op not in _OPS:
            raise GraphError(f"unknown op {op!r}")
        self._nodes.append(Node(name=name, op=op, inputs=tuple(inputs), attrs=tuple(attrs)))
        self._names.add(name)
        return name

    def input(self, name: str) -> str:
        return self._register("input", (), name=name)

    def affine(self, x, w, b, name=None):
        return self._register("affine", (x, w, b), name=name)

    def causal_conv(self, x, kernel, b, name=None):
        return self._register("causal_conv", (x, kernel, b), name=name)

    def gru_cell(self, x, h, wx, wh, b, name=None):
        return self._register("gru_cell", (x, h, wx, wh, b), name=name)

    def gru_sequence(self, x, h0, wx, wh, b, name=None):
        return self._register("gru_sequence", (x, h0, wx, wh, b), name=name)

    def relu(self, x, name=None):
        return self._register("relu", (x,), name=name)

    def tanh(self, x, name=None):
        return self._register("tanh", (x,), name=name)

    def softplus(self, x, name=None):
        return self._register("softplus", (x,), name=name)

    def sin(self, x, name=None):
        return self._register("sin", (x,), name=name)

    def cos(self, x, name=None):
        return self._register("cos", (x,), name=name)

    def add(self, a, b, name=None):
        return self._register("add", (a, b), name=name)

    def mul(self, a, b, name=None):
        return self._register("mul", (a, b), name=name)

    def scale(self, x, factor, name=None):
        return self._register("scale", (x,), attrs=(("factor", float(factor)),), name=name)

    def concat(self, xs, axis, name=None):
        return self._register("concat", tuple(xs), attrs=(("axis", int(axis)),), name=name)

    def slice(self, x, axis, start, stop, name=None):
        attrs = (("axis", int(axis)), ("start", int(start)),
                 ("stop", None if stop is None else int(stop)))
        return self._register("slice", (x,), attrs=attrs, name=name)

    def reshape(self, x, shape, name=None):
        return self._register("reshape", (x,), attrs=(("shape", tuple(shape)),), name=name)

    def logistic_log_density(self, x, mu, s, name=None):
        return self._register("logistic_log_density", (x, mu, s), name=name)

    def reduce_sum(self, x, name=None):
        return self._register("reduce_sum", (x,), name=name)

    def build(self, outputs: Sequence[str]) -> Graph:
        return Graph(nodes=tuple(self._nodes), outputs=tuple(outputs))


def _evaluate(graph: Graph, inputs: Mapping[str, np.ndarray]):
    values: dict[str, np.ndarray] = {}
    auxes: dict[str, object] = {}
    for node in graph.nodes:
        if node.op == "input":
            if node.name not in inputs:
                raise GraphError(f"missing input {node.name!r}")
            values[node.name] = np.asarray(inputs[node.name])
        else:
            fwd, _ = _OPS[node.op]
            args = [values[ref] for ref in node.inputs]
            values[node.name], auxes[node.name] = fwd(node.attrs, *args)
    return values, auxes


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate the graph and return its declared outputs by name."""
    values, _ = _evaluate(graph, inputs)
    return {name: values[name] for name in graph.outputs}


def _backward(graph, values, auxes, output, wrt):
    out_val = values[output]
    if np.ndim(out_val) != 0:
        raise GraphError(f"gradient requires a scalar output, got shape {np.shape(out_val)}")
    grads: dict[str, np.ndarray] = {output: np.array(1.0, dtype=out_val.dtype)}
    for node in reversed(graph.nodes):
        if node.op == "input":
            continue
        g = grads.pop(node.name, None)
        if g is None:
            continue
        _, bwd = _OPS[node.op]
        args = [values[ref] for ref in node.inputs]
        input_grads = bwd(node.attrs, g, auxes[node.name], values[node.name], *args)
        for ref, dg in zip(node.inputs, input_grads):
            if dg is None:
                continue
            if ref in grads:
                grads[ref] = grads[ref] + dg
            else:
                grads[ref] = dg
    result = {}
    for name in wrt:
        if name not in grads:
            raise GraphError(f"input {name!r} is unreachable from output {output!r}")
        result[name] = grads[name]
    return result


def gradient(graph: Graph, output: str, wrt: Sequence[str],
             inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar output with respect to named inputs."""
    values, auxes = _evaluate(graph, inputs)
    return _backward(graph, values, auxes, output, wrt)


def value_and_grad(graph: Graph, output: str, wrt: Sequence[str],
                   inputs: Mapping[str, np.ndarray]):
    """Single-pass value plus gradients; also returns all declared outputs."""
    values, auxes = _evaluate(graph, inputs)
    grads = _backward(graph, values, auxes, output, wrt)
    outs = {name: values[name] for name in graph.outputs}
    return outs, grads
