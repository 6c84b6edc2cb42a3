"""Rotation-equivariant layers on lifted feature fields.

Every layer is a pure numpy function.  Layers that take part in training also
have a ``*_backward`` companion returning vector-Jacobian products; the tape in
:mod:`rediffuse.autodiff` strings them together.

Kernel layouts
--------------
lifting base weights ``(Cout, Cin, p, p)``, group base weights
``(Cout, Cin, m, p, p)`` where the third axis is the input orientation
*relative* to the output orientation.  Realized stacks carry a leading ``m``
axis, one kernel per output orientation.  An *unshared* kernel (ablation) stores
that realized stack directly as its parameters.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .groups import RotationGroup

GN_EPS = 1e-5


@dataclass
class EqKernel:
    """Weights of one equivariant convolution.

    ``kind`` is ``"lifting"`` (planar input) or ``"group"`` (field input).
    With ``shared=False`` the layer is an ordinary convolution over the unrolled
    ``m * C`` channels and ``base_weights`` already holds all ``m`` kernels.
    """

    kind: str
    base_weights: np.ndarray
    m: int
    shared: bool = True

    def __post_init__(self):
        if self.kind not in ("lifting", "group"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        p = self.base_weights.shape[-1]
        if self.base_weights.shape[-2] != p or p % 2 == 0:
            raise ValueError(f"kernel taps must be square with odd size, got {self.base_weights.shape[-2:]}")
        expect = 4 if self.kind == "lifting" else 5
        expect += 0 if self.shared else 1
        if self.base_weights.ndim != expect:
            raise ValueError(f"{self.kind} kernel needs {expect} axes, got shape {self.base_weights.shape}")
        if self.kind == "group" and self.base_weights.shape[-3] != self.m:
            raise ValueError("group kernel orientation axis does not match m")
        self._realized = None

    @property
    def kernel_size(self) -> int:
        return self.base_weights.shape[-1]

    @property
    def out_channels(self) -> int:
        return self.base_weights.shape[-5 if self.kind == "group" else -4]

    @property
    def in_channels(self) -> int:
        return self.base_weights.shape[-4 if self.kind == "group" else -3]

    @property
    def num_parameters(self) -> int:
        return int(self.base_weights.size)

    @property
    def regular_parameters(self) -> int:
        """Parameters of a plain convolution between the same unrolled channel counts."""
        p2 = self.kernel_size ** 2
        cin = self.in_channels * (self.m if self.kind == "group" else 1)
        return self.m * self.out_channels * cin * p2

    @property
    def realized(self) -> np.ndarray:
        if self._realized is None:
            self._realized = build_rotated_kernels(self, RotationGroup(self.m))
        return self._realized


# ---------------------------------------------------------------------------
# kernel rotation

def _tap_coords(p):
    r = p // 2
    a, b = np.mgrid[0:p, 0:p]
    # x to the right, y upward, origin at the center tap
    return (b - r).ravel().astype(np.float64), (r - a).ravel().astype(np.float64)


def _basis(x, y, p, max_freq):
    """Radial-Gaussian times angular-Fourier functions evaluated at points ``(x, y)``."""
    rho = np.hypot(x, y)
    phi = np.arctan2(y, x)
    radii = np.unique(np.round(np.hypot(*_tap_coords(p)), 12))
    cols = []
    for r0 in radii:
        g = np.exp(-0.5 * (rho - r0) ** 2)
        cols.append(g)
        if r0 == 0:
            continue
        # angular harmonics are undefined at the origin; keep the center tap radial
        g = np.where(rho > 0, g, 0.0)
        for f in range(1, max_freq + 1):
            cols.append(g * np.cos(f * phi))
            cols.append(g * np.sin(f * phi))
    return np.stack(cols, axis=1)


@functools.lru_cache(maxsize=None)
def rotation_operators(p: int, m: int) -> np.ndarray:
    """Linear maps ``(m, p*p, p*p)`` taking flattened taps to their rotated copies.

    Quarter turns are exact permutation matrices.  Other angles sample the
    band-limited continuous filter that interpolates the taps.  Angular
    frequency is capped at 2 because the innermost tap shells hold only four
    points: higher harmonics alias onto the zeroth and first tap moments and
    would make the rotated kernel's response drift at O(1) instead of O(delta).
    """
    group = RotationGroup(m)
    eye = np.eye(p * p)
    x, y = _tap_coords(p)
    max_freq = min(m // 2, 2)
    basis = _basis(x, y, p, max_freq)
    pinv = np.linalg.pinv(basis)
    ops = []
    for k in range(m):
        q = group.quarter_turns(k)
        if q is not None:
            ops.append(np.rot90(eye.reshape(p * p, p, p), q, axes=(1, 2)).reshape(p * p, p * p).T.copy())
            continue
        t = group.angles[k]
        # the rotated filter at x equals the filter at R^-1 x
        xs = math.cos(t) * x + math.sin(t) * y
        ys = -math.sin(t) * x + math.cos(t) * y
        ops.append(_basis(xs, ys, p, max_freq) @ pinv)
    return np.stack(ops)


def _apply_tap_ops(ops, w):
    # ops (m, P, P), w (..., p, p) -> (m, ..., p, p)
    p = w.shape[-1]
    flat = w.reshape(w.shape[:-2] + (p * p,))
    out = np.einsum("kab,...b->k...a", ops.astype(w.dtype, copy=False), flat)
    return out.reshape((ops.shape[0],) + w.shape)


def build_rotated_kernels(k: EqKernel, group: RotationGroup) -> np.ndarray:
    """Stack of ``m`` realized kernels, one per output orientation."""
    if k.m != group.m:
        raise ValueError(f"kernel built for m={k.m} used with group of order {group.m}")
    return realize(k.base_weights, k.kind, group.m, k.shared)


def realize(base: np.ndarray, kind: str, m: int, shared: bool = True) -> np.ndarray:
    if not shared:
        return base
    p = base.shape[-1]
    if p % 2 == 0:
        raise ValueError("even kernel size has no center tap")
    ops = rotation_operators(p, m)
    if kind == "lifting":
        return _apply_tap_ops(ops, base)
    # output orientation j reads input orientation g with relative kernel slot g - j
    shifted = np.stack([np.roll(base, j, axis=-3) for j in range(m)])
    p2 = p * p
    flat = shifted.reshape(shifted.shape[:-2] + (p2,))
    out = np.einsum("jab,j...b->j...a", ops.astype(base.dtype, copy=False), flat)
    return out.reshape(shifted.shape)


def realize_backward(grad_realized: np.ndarray, kind: str, m: int, shared: bool = True) -> np.ndarray:
    if not shared:
        return grad_realized
    p = grad_realized.shape[-1]
    ops = rotation_operators(p, m).astype(grad_realized.dtype, copy=False)
    flat = grad_realized.reshape(grad_realized.shape[:-2] + (p * p,))
    back = np.einsum("jab,j...a->j...b", ops, flat).reshape(grad_realized.shape)
    if kind == "lifting":
        return back.sum(axis=0)
    return sum(np.roll(back[j], -j, axis=-3) for j in range(m))


# ---------------------------------------------------------------------------
# planar correlation core, channels last

def _im2col(x, p):
    r = p // 2
    n, h, w, c = x.shape
    if p == 1:
        return x.reshape(n * h * w, c)
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    cols = np.empty((n, h, w, p * p * c), dtype=x.dtype)
    for a in range(p):
        for b in range(p):
            s = (a * p + b) * c
            cols[..., s:s + c] = xp[:, a:a + h, b:b + w]
    return cols.reshape(n * h * w, p * p * c)


def correlate(x: np.ndarray, w: np.ndarray, return_cols: bool = False):
    """Zero-padded 'same' cross-correlation. ``x (N,H,W,Cin)``, ``w (p,p,Cin,Cout)``."""
    n, h, wd, c = x.shape
    p = w.shape[0]
    if w.shape[2] != c:
        raise ValueError(f"kernel expects {w.shape[2]} input channels, got {c}")
    cols = _im2col(x, p)
    y = (cols @ w.reshape(p * p * c, -1)).reshape(n, h, wd, -1)
    return (y, cols) if return_cols else y


def correlate_backward(gy, cols, w):
    """Input and weight gradients; ``cols`` is the im2col matrix saved by the forward pass."""
    gx = correlate(gy, np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)))
    gw = (cols.T @ gy.reshape(-1, gy.shape[-1])).reshape(w.shape)
    return gx, gw


def _lift_matrix(realized):
    # (m, Cout, Cin, p, p) -> (p, p, Cin, m*Cout)
    m, co, ci, p, _ = realized.shape
    return np.ascontiguousarray(realized.transpose(3, 4, 2, 0, 1)).reshape(p, p, ci, m * co)


def _group_matrix(realized):
    # (m_out, Cout, Cin, m_in, p, p) -> (p, p, m_in*Cin, m_out*Cout)
    m, co, ci, mi, p, _ = realized.shape
    return np.ascontiguousarray(realized.transpose(4, 5, 3, 2, 0, 1)).reshape(p, p, mi * ci, m * co)


def _batched(x, ndim):
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ValueError(f"expected {ndim} or {ndim + 1} axes, got shape {x.shape}")


# ---------------------------------------------------------------------------
# layers

def lift_conv(img: np.ndarray, k: EqKernel) -> np.ndarray:
    """Correlate a planar image with each of the ``m`` rotated kernels."""
    if k.kind != "lifting":
        raise ValueError("lift_conv needs a lifting kernel")
    x, single = _batched(img, 3)
    if x.shape[-1] != k.in_channels:
        raise ValueError(f"image has {x.shape[-1]} channels, kernel expects {k.in_channels}")
    out = lift_conv_raw(x, k.realized)
    return out[0] if single else out


def lift_conv_raw(x, realized, return_cols=False):
    n, h, w, _ = x.shape
    m, co = realized.shape[:2]
    y, cols = correlate(x, _lift_matrix(realized), return_cols=True)
    y = y.reshape(n, h, w, m, co)
    return (y, cols) if return_cols else y


def lift_conv_raw_backward(gy, cols, realized):
    wmat = _lift_matrix(realized)
    n, h, w, m, co = gy.shape
    gx, gw = correlate_backward(gy.reshape(n, h, w, m * co), cols, wmat)
    p, ci = wmat.shape[0], wmat.shape[2]
    grealized = gw.reshape(p, p, ci, m, co).transpose(3, 4, 2, 0, 1)
    return gx, grealized


def group_conv(f: np.ndarray, k: EqKernel) -> np.ndarray:
    """Group correlation: output orientation ``j`` sums over every input orientation."""
    if k.kind != "group":
        raise ValueError("group_conv needs a group kernel")
    x, single = _batched(f, 4)
    if x.shape[-2] != k.m:
        raise ValueError(f"field group order {x.shape[-2]} does not match kernel m={k.m}")
    if x.shape[-1] != k.in_channels:
        raise ValueError(f"field has {x.shape[-1]} channels, kernel expects {k.in_channels}")
    out = group_conv_raw(x, k.realized)
    return out[0] if single else out


def group_conv_raw(x, realized, return_cols=False):
    n, h, w, m, ci = x.shape
    co = realized.shape[1]
    y, cols = correlate(x.reshape(n, h, w, m * ci), _group_matrix(realized), return_cols=True)
    y = y.reshape(n, h, w, m, co)
    return (y, cols) if return_cols else y


def group_conv_raw_backward(gy, cols, realized, in_shape):
    n, h, w, m, ci = in_shape
    co = realized.shape[1]
    wmat = _group_matrix(realized)
    gx, gw = correlate_backward(gy.reshape(n, h, w, m * co), cols, wmat)
    p = wmat.shape[0]
    grealized = gw.reshape(p, p, m, ci, m, co).transpose(4, 5, 3, 2, 0, 1)
    return gx.reshape(in_shape), grealized


def eq_maxpool(f: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max over each orientation slice."""
    out, _ = eq_maxpool_forward(f)
    return out


def eq_maxpool_forward(f):
    x, single = _batched(f, 4)
    n, h, w, m, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, m, c).transpose(0, 1, 3, 5, 6, 2, 4)
    win = win.reshape(n, h // 2, w // 2, m, c, 4)
    # first maximum in row-major window order receives the gradient
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return (out[0] if single else out), idx


def eq_maxpool_backward(gy, idx, in_shape):
    n, h2, w2, m, c = idx.shape
    g = np.zeros((n, h2, w2, m, c, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy.reshape(idx.shape)[..., None], axis=-1)
    g = g.reshape(n, h2, w2, m, c, 2, 2).transpose(0, 1, 5, 2, 6, 3, 4)
    return g.reshape(in_shape)


_UP_NEAR, _UP_SIDE, _UP_FAR = 0.5625, 0.1875, 0.0625


def eq_upsample(f: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling on half-pixel centers, edges clamped.

    Each output is ``9/16 a + 3/16 (b + c) + 1/16 d`` with ``a`` the nearest
    input, ``b, c`` its two side neighbours toward the output point and ``d``
    the diagonal one.  The sum is written so that swapping ``b`` and ``c`` (what
    a quarter turn does) leaves every floating-point result unchanged.
    """
    x, single = _batched(f, 4)
    n, h, w = x.shape[:3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0), (0, 0)), mode="edge")
    out = np.empty((n, 2 * h, 2 * w) + x.shape[3:], dtype=x.dtype)
    for di in (0, 1):
        si = 0 if di == 0 else 2
        for dj in (0, 1):
            sj = 0 if dj == 0 else 2
            a = x
            b = xp[:, si:si + h, 1:1 + w]
            c = xp[:, 1:1 + h, sj:sj + w]
            d = xp[:, si:si + h, sj:sj + w]
            out[:, di::2, dj::2] = (_UP_NEAR * a + _UP_SIDE * (b + c)) + _UP_FAR * d
    return out[0] if single else out


def eq_upsample_backward(gy):
    n, h2, w2 = gy.shape[:3]
    h, w = h2 // 2, w2 // 2
    gp = np.zeros((n, h + 2, w + 2) + gy.shape[3:], dtype=gy.dtype)
    for di in (0, 1):
        si = 0 if di == 0 else 2
        for dj in (0, 1):
            sj = 0 if dj == 0 else 2
            g = gy[:, di::2, dj::2]
            gp[:, 1:1 + h, 1:1 + w] += _UP_NEAR * g
            gp[:, si:si + h, 1:1 + w] += _UP_SIDE * g
            gp[:, 1:1 + h, sj:sj + w] += _UP_SIDE * g
            gp[:, si:si + h, sj:sj + w] += _UP_FAR * g
    # fold the edge padding back onto the border it replicated
    gp[:, 1] += gp[:, 0]
    gp[:, h] += gp[:, h + 1]
    gp[:, :, 1] += gp[:, :, 0]
    gp[:, :, w] += gp[:, :, w + 1]
    return gp[:, 1:1 + h, 1:1 + w]


@dataclass
class GroupNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    num_groups: int
    epsilon: float = GN_EPS

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be matching 1-D per-channel vectors")
        if self.gamma.shape[0] % self.num_groups:
            raise ValueError(f"{self.gamma.shape[0]} channels not divisible into {self.num_groups} groups")


def group_norm(f: np.ndarray, p: GroupNormParams) -> np.ndarray:
    x, single = _batched(f, 4)
    out, _ = group_norm_forward(x, p.gamma, p.beta, p.num_groups, p.epsilon)
    return out[0] if single else out


def _group_sums(v, num_groups):
    # v (N, H, W, m, C) -> (N, 1, 1, 1, G, 1) sums over space, orientation and group channels
    n, c = v.shape[0], v.shape[-1]
    per_channel = v.reshape(n, -1, c).sum(axis=1)
    return per_channel.reshape(n, 1, 1, 1, num_groups, c // num_groups).sum(axis=-1, keepdims=True)


def _expand(stat, c):
    n, g = stat.shape[0], stat.shape[-2]
    return np.repeat(stat, c // g, axis=-1).reshape(n, 1, 1, 1, c)


def group_norm_forward(x, gamma, beta, num_groups, eps=GN_EPS):
    """Normalize over space, the group axis and the channels of each channel group."""
    n, h, w, m, c = x.shape
    if c == 0:
        raise ValueError("group norm on a field with zero channels")
    if c % num_groups:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    count = h * w * m * (c // num_groups)
    mu = _expand(_group_sums(x, num_groups) / count, c)
    xc = x - mu
    var = _group_sums(xc * xc, num_groups) / count
    rstd = _expand(1.0 / np.sqrt(var + eps), c).astype(x.dtype, copy=False)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, num_groups)


def group_norm_backward(gy, cache, gamma):
    xhat, rstd, num_groups = cache
    n, h, w, m, c = xhat.shape
    flat_gy = gy.reshape(n, -1, c)
    flat_xh = xhat.reshape(n, -1, c)
    gbeta = flat_gy.sum(axis=(0, 1))
    ggamma = (flat_gy * flat_xh).sum(axis=(0, 1))
    count = h * w * m * (c // num_groups)
    dxhat = gy * gamma
    mean_d = _expand(_group_sums(dxhat, num_groups) / count, c)
    mean_dx = _expand(_group_sums(dxhat * xhat, num_groups) / count, c)
    gx = rstd * (dxhat - mean_d - xhat * mean_dx)
    return gx, ggamma, gbeta


def silu(f: np.ndarray) -> np.ndarray:
    return f * expit(f)


def silu_backward(gy, x, sig=None):
    s = expit(x) if sig is None else sig
    return gy * (s * (1 + x * (1 - s)))


def group_pool(f: np.ndarray) -> np.ndarray:
    """Mean over the group axis; turns a field into a planar image."""
    return f.mean(axis=-2)
