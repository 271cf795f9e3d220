"""Minimal reverse-mode gradient tape over numpy arrays.

A Node wraps an ndarray value. Recording appends nodes in creation order,
which is already a topological order of the graph, so the backward pass is
one reverse sweep accumulating gradients keyed by node identity. Leaf nodes
(parameters, quantizer scales) are registered by name on the tape and their
accumulated gradients come back as a name -> array dict.

Ops take the tape as the first argument; passing None runs the same forward
math without recording anything, which is the inference path.
"""

from __future__ import annotations

import numpy as np

GELU_C0 = np.sqrt(2.0 / np.pi)
GELU_C1 = 0.044715


class Node:
    __slots__ = ("value", "parents", "grad_fn")

    def __init__(self, value, parents=(), grad_fn=None):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Recorded forward nodes plus named leaves and named outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self.consumed = False

    def leaf(self, name: str, value: np.ndarray) -> Node:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf {name!r}")
        node = Node(value)
        self.leaves[name] = node
        return node

    def add(self, node: Node) -> Node:
        self.nodes.append(node)
        return node


def record(tape: Tape | None, value, parents, grad_fn) -> Node:
    if tape is None:
        return Node(value)
    return tape.add(Node(value, tuple(parents), grad_fn))


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def backward(tape: Tape, seeds: dict[Node, np.ndarray]) -> dict[str, np.ndarray]:
    """Reverse sweep. seeds maps output nodes to upstream gradients; returns
    accumulated gradients for every named leaf (zeros where unreached)."""
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {}
    for node, g in seeds.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(node.value):
            raise ValueError(
                f"seed gradient shape {g.shape} != value shape {np.shape(node.value)}")
        prev = grads.get(id(node))
        grads[id(node)] = g if prev is None else prev + g
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(id(leaf))
        out[name] = g if g is not None else np.zeros_like(leaf.value)
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(tape, a: Node, b: Node) -> Node:
    v = a.value + b.value
    if v.shape != a.value.shape or v.shape != b.value.shape:
        raise ValueError("add requires equal shapes")
    return record(tape, v, (a, b), lambda g: (g, g))


def scale(tape, a: Node, c: float) -> Node:
    return record(tape, a.value * c, (a,), lambda g: (g * c,))


def matmul(tape, a: Node, b: Node) -> Node:
    """Batched matrix product; leading dims of both operands must agree."""
    av, bv = a.value, b.value
    if av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"batch dims disagree: {av.shape} x {bv.shape}")
    v = av @ bv

    def grad_fn(g):
        return (g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g)

    return record(tape, v, (a, b), grad_fn)


def linear(tape, x: Node, w: Node, b: Node | None = None) -> Node:
    """y = x @ w.T (+ b) with w stored [out, in] and x [..., in]."""
    xv, wv = x.value, w.value
    v = xv @ wv.T
    if b is not None:
        v = v + b.value

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        gw = g2.T @ x2
        gx = g @ wv
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return record(tape, v, parents, grad_fn)


def reshape(tape, x: Node, shape) -> Node:
    old = x.value.shape
    return record(tape, x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(tape, x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return record(tape, np.ascontiguousarray(x.value.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def narrow(tape, x: Node, start: int, size: int) -> Node:
    """Slice [start, start+size) along the last axis."""
    v = np.ascontiguousarray(x.value[..., start:start + size])

    def grad_fn(g):
        gx = np.zeros_like(x.value)
        gx[..., start:start + size] = g
        return (gx,)

    return record(tape, v, (x,), grad_fn)


def layernorm(tape, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    v = xhat * gamma.value + beta.value

    def grad_fn(g):
        lead = (-1, xv.shape[-1])
        gxhat = g * gamma.value
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggamma = (g * xhat).reshape(lead).sum(axis=0)
        gbeta = g.reshape(lead).sum(axis=0)
        return (gx, ggamma, gbeta)

    return record(tape, v, (x, gamma, beta), grad_fn)


def gelu(tape, x: Node) -> Node:
    """tanh-approximate GELU; the same closed form is used by the
    finite-difference checks, so they agree to machine precision."""
    xv = x.value
    u = GELU_C0 * (xv + GELU_C1 * xv ** 3)
    th = np.tanh(u)
    v = 0.5 * xv * (1.0 + th)

    def grad_fn(g):
        sech2 = 1.0 - th * th
        du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * xv * xv)
        return (g * (0.5 * (1.0 + th) + 0.5 * xv * sech2 * du),)

    return record(tape, v, (x,), grad_fn)


def softmax_last(tape, x: Node) -> Node:
    xv = x.value
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return ((g - (g * p).sum(axis=-1, keepdims=True)) * p,)

    return record(tape, p, (x,), grad_fn)


def mean_axis(tape, x: Node, axis: int) -> Node:
    n = x.value.shape[axis]
    v = x.value.mean(axis=axis)

    def grad_fn(g):
        return (np.expand_dims(g, axis).repeat(n, axis=axis) / n,)

    return record(tape, v, (x,), grad_fn)
