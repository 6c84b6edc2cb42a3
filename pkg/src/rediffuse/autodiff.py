"""A small reverse-mode tape over the layer set used by the denoiser, plus Adam.

Usage::

    tape = Tape()
    w = tape.param("w", w0)
    loss = ad.l2_loss(ad.group_conv(tape.const(x), w, m=4), target)
    grads = backward(tape, loss)

Nodes are appended in evaluation order; :func:`backward` replays them in
exact reverse order, so reductions happen in a fixed order and identical inputs
give bit-identical gradients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from . import eqops

log = logging.getLogger(__name__)


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "index", "name")

    def __init__(self, tape, value, parents=(), vjp=None, index=-1, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} #{self.index} shape={self.value.shape} dtype={self.value.dtype}>"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)


class Tape:
    """Append-only record of evaluated nodes and the named parameters feeding them.

    ``Tape(record=False)`` evaluates without keeping backward closures, for
    inference.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}

    def _push(self, value, parents=(), vjp=None, name=None) -> Node:
        node = Node(self, value, parents if self.record else (), vjp if self.record else None,
                    len(self.nodes), name)
        if self.record:
            self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self.parameters:
            raise KeyError(f"parameter {name!r} registered twice")
        node = self._push(np.asarray(value), name=name)
        self.parameters[name] = node
        return node

    def params(self, values: dict[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.param(k, v) for k, v in values.items()}

    def const(self, value) -> Node:
        return self._push(np.asarray(value))


def _record(parents, value, vjp):
    for p in parents:
        if isinstance(p, Node):
            return p.tape._push(value, tuple(parents), vjp)
    raise TypeError("op needs at least one tape-bound input")


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar node with respect to every registered parameter.

    The tape is consumed: closures are dropped as soon as they have run so
    activations are freed during the sweep rather than at the next cyclic GC.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not tape.record:
        raise RuntimeError("tape was created with record=False")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.vjp is None:
            if g is not None and node.name is not None:
                grads[node.index] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not isinstance(parent, Node):
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
        node.vjp, node.parents = None, ()
    out = {}
    for name, node in tape.parameters.items():
        g = grads.get(node.index)
        out[name] = np.zeros_like(node.value) if g is None else g.astype(node.value.dtype, copy=False)
    tape.nodes.clear()
    tape.record = False
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Node) else x


def add(a, b) -> Node:
    av, bv = _val(a), _val(b)
    return _record((a, b), av + bv,
                   lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b) -> Node:
    av, bv = _val(a), _val(b)
    return _record((a, b), av - bv,
                   lambda g: (_unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))))


def scale(a: Node, c: float) -> Node:
    return _record((a,), a.value * c, lambda g: (g * c,))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return _record((a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def concat(nodes, axis: int = -1) -> Node:
    vals = [_val(n) for n in nodes]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(tuple(nodes), np.concatenate(vals, axis=axis),
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def total(a: Node) -> Node:
    return _record((a,), a.value.sum(), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def mean(a: Node) -> Node:
    n = a.value.size
    return _record((a,), a.value.mean(),
                   lambda g: (np.broadcast_to(g / n, a.value.shape).astype(a.value.dtype),))


def center(a: Node) -> Node:
    """Subtract each sample's mean over all non-batch axes."""
    axes = tuple(range(1, a.value.ndim))
    c = lambda v: v - v.mean(axis=axes, keepdims=True)
    return _record((a,), c(a.value), lambda g: (c(g),))


def silu(a: Node) -> Node:
    x = a.value
    sig = expit(x)
    return _record((a,), x * sig, lambda g: (eqops.silu_backward(g, x, sig),))


def dense(x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w + b`` on the last axis."""
    xv, wv = x.value, w.value
    y = xv @ wv
    if b is not None:
        y = y + b.value

    def vjp(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = None if b is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _record((x, w, b), y, vjp)


# ---------------------------------------------------------------------------
# equivariant layers

def lift_conv(x, w: Node, m: int, shared: bool = True) -> Node:
    """Lifting correlation of a batched planar image ``(N,H,W,C)`` with base weights ``w``."""
    xv = _val(x)
    realized = eqops.realize(w.value, "lifting", m, shared)
    out, cols = eqops.lift_conv_raw(xv, realized, return_cols=True)

    def vjp(g):
        gx, gr = eqops.lift_conv_raw_backward(g, cols, realized)
        return gx, eqops.realize_backward(gr, "lifting", m, shared)

    return _record((x, w), out, vjp)


def group_conv(f, w: Node, m: int, shared: bool = True) -> Node:
    fv = _val(f)
    if fv.shape[-2] != m:
        raise ValueError(f"field group order {fv.shape[-2]} does not match m={m}")
    realized = eqops.realize(w.value, "group", m, shared)
    out, cols = eqops.group_conv_raw(fv, realized, return_cols=True)
    in_shape = fv.shape

    def vjp(g):
        gx, gr = eqops.group_conv_raw_backward(g, cols, realized, in_shape)
        return gx, eqops.realize_backward(gr, "group", m, shared)

    return _record((f, w), out, vjp)


def maxpool(f: Node) -> Node:
    shape = f.value.shape
    out, idx = eqops.eq_maxpool_forward(f.value)
    return _record((f,), out, lambda g: (eqops.eq_maxpool_backward(g, idx, shape),))


def upsample(f: Node) -> Node:
    return _record((f,), eqops.eq_upsample(f.value), lambda g: (eqops.eq_upsample_backward(g),))


def group_norm(f: Node, gamma: Node, beta: Node, num_groups: int, eps: float = eqops.GN_EPS) -> Node:
    out, cache = eqops.group_norm_forward(f.value, gamma.value, beta.value, num_groups, eps)
    gv = gamma.value
    return _record((f, gamma, beta), out, lambda g: eqops.group_norm_backward(g, cache, gv))


def group_pool(f: Node) -> Node:
    m = f.value.shape[-2]
    return _record((f,), eqops.group_pool(f.value),
                   lambda g: (np.repeat(g[..., None, :] / m, m, axis=-2),))


def l2_loss(pred: Node, target) -> Node:
    """Batch mean of the per-sample Euclidean norm of ``target - pred``."""
    tv = _val(target)
    diff = tv - pred.value
    n = diff.shape[0]
    norms = np.sqrt((diff.reshape(n, -1) ** 2).sum(axis=1))
    value = norms.mean()

    def vjp(g):
        safe = np.where(norms > 0, norms, 1.0)
        coef = (g / n) / safe
        coef = np.where(norms > 0, coef, 0.0).astype(diff.dtype)
        gp = -coef.reshape((n,) + (1,) * (diff.ndim - 1)) * diff
        return gp, None

    return _record((pred, target), np.asarray(value, dtype=diff.dtype), vjp)


# ---------------------------------------------------------------------------
# optimizer

class NonFiniteGradientError(FloatingPointError):
    pass


def lr_at(epoch: int, lr0: float = 2e-4, decay: float = 0.99, every: int = 1000) -> float:
    """Step decay: multiply by ``decay`` once per completed block of ``every`` epochs."""
    return lr0 * decay ** (epoch // every)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update. Returns new parameter arrays; ``state`` is advanced in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name!r} has {bad} non-finite entries "
                                         f"at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        upd = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        new[name] = (p - upd).astype(p.dtype, copy=False)
    return new


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(build_loss: Callable[[Tape, dict[str, Node]], Node],
                      params: dict[str, np.ndarray], probes: int = 20, h: float = 1e-3,
                      seed: int = 0, names: list[str] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_loss(tape, nodes)`` must be deterministic.  ``probes`` coordinates
    are drawn uniformly over the parameters listed in ``names`` (all by default).
    """
    tape = Tape()
    loss = build_loss(tape, tape.params(params))
    grads = backward(tape, loss)

    def value(p):
        t = Tape(record=False)
        return float(build_loss(t, t.params(p)).value)

    rng = np.random.default_rng(seed)
    names = list(params) if names is None else names
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    worst = 0.0
    for _ in range(probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat_idx = int(rng.integers(params[name].size))
        idx = np.unravel_index(flat_idx, params[name].shape)
        plus = {k: v.copy() if k == name else v for k, v in params.items()}
        minus = {k: v.copy() if k == name else v for k, v in params.items()}
        plus[name][idx] += h
        minus[name][idx] -= h
        numeric = (value(plus) - value(minus)) / (2 * h)
        analytic = float(grads[name][idx])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        err = abs(analytic - numeric) / denom
        log.debug("fd %s%s analytic=%.6g numeric=%.6g rel=%.3g", name, idx, analytic, numeric, err)
        worst = max(worst, err)
    return worst
