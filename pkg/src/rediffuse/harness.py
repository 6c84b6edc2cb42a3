"""Equivariance measurements against analytically known smooth fields.

Fields are sums of a few cosines with frequency components bounded by a
bandlimit ``b``, so their gradient norm is at most ``A * 2*pi*b*sqrt(2)`` by
construction.  Rotated inputs are rendered from the analytic function instead
of being resampled, which keeps interpolation error out of the input side of
every measurement.

Coordinates: pixel ``(i, j)`` of an ``n x n`` grid with mesh ``delta`` sits at
``x1 = (j - c) * delta``, ``x2 = (c - i) * delta`` with ``c = (n - 1) / 2``, so
a positive angle turns the picture counter-clockwise like ``np.rot90``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import eqops
from .groups import RotationGroup, interior_mask, rotate_field, rotate_image, rotate_image_arbitrary

# exact ops are checked against this instead of a bound of 0
EXACT_TOL = 1e-6


def maxpool_bound(G: float, delta: float) -> float:
    return 2 * math.sqrt(2) * G * delta


def bilinear_bound(G: float, delta: float) -> float:
    return 2 * (math.sqrt(2) + 1) * G * delta


@dataclass(frozen=True)
class SmoothFieldSpec:
    bandlimit: float = 1.0
    amplitude: float = 1.0
    delta: float = 0.1
    extent: float = 3.2
    n_terms: int = 4

    def __post_init__(self):
        if self.bandlimit < 0 or self.amplitude < 0:
            raise ValueError("bandlimit and amplitude must be non-negative")
        if self.bandlimit * self.delta >= 0.5:
            raise ValueError(f"bandlimit*delta = {self.bandlimit * self.delta:.3g} violates Nyquist (< 0.5)")
        if not 1 <= self.n_terms <= 4:
            raise ValueError("n_terms must be between 1 and 4")
        n = self.extent / self.delta
        if abs(n - round(n)) > 1e-9 or round(n) % 2:
            raise ValueError(f"extent/delta = {n:.6g} must be an even integer")

    @property
    def size(self) -> int:
        return int(round(self.extent / self.delta))

    @property
    def G(self) -> float:
        return self.amplitude * 2 * math.pi * self.bandlimit * math.sqrt(2)

    @property
    def H(self) -> float:
        return self.amplitude * (2 * math.pi * self.bandlimit) ** 2 * 2

    def with_delta(self, delta: float) -> "SmoothFieldSpec":
        return SmoothFieldSpec(self.bandlimit, self.amplitude, delta, self.extent, self.n_terms)


@dataclass
class CosineSum:
    """``amplitude * sum_n w_n cos(2 pi f_n . x + phi_n)`` per channel, ``sum_n w_n = 1``."""

    amplitude: float
    freqs: np.ndarray    # (C, n, 2)
    phases: np.ndarray   # (C, n)
    weights: np.ndarray  # (C, n)

    def __call__(self, x1, x2) -> np.ndarray:
        """Evaluate at broadcastable coordinates; channels go last."""
        x1 = np.asarray(x1, dtype=np.float64)[..., None, None]
        x2 = np.asarray(x2, dtype=np.float64)[..., None, None]
        arg = 2 * np.pi * (self.freqs[..., 0] * x1 + self.freqs[..., 1] * x2) + self.phases
        return self.amplitude * (self.weights * np.cos(arg)).sum(axis=-1)


def random_cosine_sum(spec: SmoothFieldSpec, seed: int, channels: int = 1) -> CosineSum:
    rng = np.random.default_rng(seed)
    b = spec.bandlimit
    freqs = rng.uniform(-b, b, size=(channels, spec.n_terms, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(channels, spec.n_terms))
    weights = rng.uniform(0.5, 1.0, size=(channels, spec.n_terms))
    weights /= weights.sum(axis=1, keepdims=True)
    return CosineSum(spec.amplitude, freqs, phases, weights)


def grid_coords(size: int, delta: float):
    c = (size - 1) / 2
    ii, jj = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    return (jj - c) * delta, (c - ii) * delta


def _rotate_points(x1, x2, theta):
    ct, st = math.cos(theta), math.sin(theta)
    return ct * x1 - st * x2, st * x1 + ct * x2


def render_smooth_field(spec: SmoothFieldSpec, seed: int, m: int, channels: int = 1,
                        k: int = 0, func: CosineSum | None = None):
    """Sample ``e(x, R_g) = e0(R_g^-1 x)`` on the grid, acted on by group element ``k``.

    Returns ``(field (n, n, m, C), G)``.  The acted field is evaluated
    analytically as ``e(R_k^-1 x, R_k^-1 R_g)``, never by resampling.
    """
    e0 = func or random_cosine_sum(spec, seed, channels)
    x1, x2 = grid_coords(spec.size, spec.delta)
    out = np.empty((spec.size, spec.size, m, e0.freqs.shape[0]))
    for g in range(m):
        y1, y2 = _rotate_points(x1, x2, -2 * np.pi * k / m)
        s = (g - k) % m
        y1, y2 = _rotate_points(y1, y2, -2 * np.pi * s / m)
        out[:, :, g] = e0(y1, y2)
    return out, spec.G


def render_smooth_image(spec: SmoothFieldSpec, seed: int, channels: int = 1,
                        theta: float = 0.0, window: bool = True, func: CosineSum | None = None,
                        window_radius: float | None = None):
    """Planar image ``(n, n, C)`` of the analytic field rotated by ``theta``.

    ``window`` multiplies by the radial ``cos^2`` taper that vanishes a few
    pixels inside the border (or at physical radius ``window_radius``), so
    zero padding behaves the same for every rotation.
    """
    e0 = func or random_cosine_sum(spec, seed, channels)
    x1, x2 = grid_coords(spec.size, spec.delta)
    y1, y2 = _rotate_points(x1, x2, -theta)
    img = e0(y1, y2)
    if window:
        img = img * radial_window(spec.size, spec.delta, radius=window_radius)[..., None]
    return img


def radial_window(size: int, delta: float, border_px: float = 2.0, radius: float | None = None) -> np.ndarray:
    x1, x2 = grid_coords(size, delta)
    r = np.hypot(x1, x2) / delta
    rmax = size / 2 - border_px if radius is None else radius / delta
    w = np.cos(0.5 * np.pi * np.minimum(r / rmax, 1.0)) ** 2
    return w


@dataclass
class EquivarianceReport:
    op: str
    m: int
    k: int | None
    angle: float
    delta: float | None
    error: float
    bound: float | None
    passed: bool
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _report(op, m, k, angle, delta, error, bound, tol=None, extra=None):
    if bound is not None:
        passed = error <= bound * (1 + 1e-6)
    else:
        passed = error <= (EXACT_TOL if tol is None else tol)
    return EquivarianceReport(op, m, k, float(angle), delta, float(error), bound, bool(passed), extra or {})


# ---------------------------------------------------------------------------
# continuous extensions of the resampling ops

def _cell_max(F, p_i, p_j):
    """Max of the 2x2 grid cell containing each fractional index ``(p_i, p_j)``."""
    i0 = np.floor(p_i + 1e-9).astype(int)
    j0 = np.floor(p_j + 1e-9).astype(int)
    vals = [F[i0 + a, j0 + b] for a in (0, 1) for b in (0, 1)]
    return np.max(vals, axis=0)


def _to_index(x1, x2, size, delta):
    c = (size - 1) / 2
    return c - x2 / delta, x1 / delta + c


def measure_maxpool(spec: SmoothFieldSpec, seed: int, m: int, k: int, channels: int = 2) -> EquivarianceReport:
    """Max over the interior of ``|MP(pi F)(x, R) - MP(F)(R_k^-1 x, R_k^-1 R)|``.

    ``MP(F)`` at a continuous point is the max of the grid cell containing it;
    at the centres of the pooling windows it is exactly :func:`eqops.eq_maxpool`.
    """
    theta = 2 * np.pi * k / m
    e0 = random_cosine_sum(spec, seed, channels)
    F, G = render_smooth_field(spec, seed, m, func=e0)
    Frot, _ = render_smooth_field(spec, seed, m, k=k, func=e0)
    lhs = eqops.eq_maxpool(Frot)
    n = spec.size
    # a pooled value stands for the centre of its 2x2 window
    c = (n - 1) / 2
    centers = np.arange(0, n, 2) + 0.5
    ci, cj = np.meshgrid(centers, centers, indexing="ij")
    x1, x2 = (cj - c) * spec.delta, (c - ci) * spec.delta
    y1, y2 = _rotate_points(x1, x2, -theta)
    pi, pj = _to_index(y1, y2, n, spec.delta)
    keep = (pi >= 1) & (pj >= 1) & (pi <= n - 3) & (pj <= n - 3)
    pi, pj = np.where(keep, pi, 1.0), np.where(keep, pj, 1.0)
    err = 0.0
    for g in range(m):
        rhs = _cell_max(F[:, :, (g - k) % m], pi, pj)
        err = max(err, float(np.abs(lhs[:, :, g] - rhs)[keep].max()))
    return _report("maxpool", m, k, theta, spec.delta, err, maxpool_bound(G, spec.delta),
                   extra={"G": G, "points": int(keep.sum())})


def measure_upsample(spec: SmoothFieldSpec, seed: int, m: int, k: int, channels: int = 2) -> EquivarianceReport:
    """Same functional for bilinear 2x upsampling; the continuous extension is bilinear interpolation."""
    theta = 2 * np.pi * k / m
    e0 = random_cosine_sum(spec, seed, channels)
    F, G = render_smooth_field(spec, seed, m, func=e0)
    Frot, _ = render_smooth_field(spec, seed, m, k=k, func=e0)
    lhs = eqops.eq_upsample(Frot)
    n = spec.size
    # output pixel u sits at input index (u + 0.5) / 2 - 0.5
    u = (np.arange(2 * n) + 0.5) / 2 - 0.5
    ui, uj = np.meshgrid(u, u, indexing="ij")
    c = (n - 1) / 2
    x1, x2 = (uj - c) * spec.delta, (c - ui) * spec.delta
    y1, y2 = _rotate_points(x1, x2, -theta)
    pi, pj = _to_index(y1, y2, n, spec.delta)
    keep = (pi >= 0) & (pj >= 0) & (pi <= n - 1) & (pj <= n - 1) & (ui >= 0) & (uj >= 0) \
        & (ui <= n - 1) & (uj <= n - 1)
    err = 0.0
    for g in range(m):
        for ch in range(F.shape[-1]):
            rhs = ndimage.map_coordinates(F[:, :, (g - k) % m, ch], [pi, pj], order=1, mode="nearest")
            err = max(err, float(np.abs(lhs[:, :, g, ch] - rhs)[keep].max()))
    return _report("upsample", m, k, theta, spec.delta, err, bilinear_bound(G, spec.delta),
                   extra={"G": G, "points": int(keep.sum())})


def measure_group_norm(f: np.ndarray, m: int, k: int, num_groups: int = 1, seed: int = 0) -> EquivarianceReport:
    """Group norm against the field action.

    Quarter turns act by exact index permutation.  Other group elements move
    samples to points off the grid, so the action is applied to the sample set
    itself: values keep their (rotated) positions and the orientation axis is
    cycled.  Group norm only sees values and their orientation/channel labels,
    so this is the exact discrete counterpart of the continuous statement.
    """
    group = RotationGroup(m)
    rng = np.random.default_rng(seed)
    c = f.shape[-1]
    gamma = rng.normal(1.0, 0.2, c)
    beta = rng.normal(0.0, 0.2, c)
    params = eqops.GroupNormParams(gamma, beta, num_groups)
    if group.quarter_turns(k) is not None:
        act = lambda x: rotate_field(x, group, k)  # noqa: E731
    else:
        act = lambda x: np.roll(x, k, axis=-2)  # noqa: E731
    err = float(np.abs(eqops.group_norm(act(f), params) - act(eqops.group_norm(f, params))).max())
    return _report("group_norm", m, k, 2 * np.pi * k / m, None, err, None)


def measure_field_op(op, f: np.ndarray, m: int, k: int, name: str, margin: int = 0,
                     tol: float = EXACT_TOL) -> EquivarianceReport:
    """``|op(pi_k f) - pi_k op(f)|`` under the grid action; needs ``k`` to be a quarter turn."""
    group = RotationGroup(m)
    if group.quarter_turns(k) is None:
        raise ValueError(f"element {k} of C_{m} is not a quarter turn; use the analytic measurements")
    a = op(rotate_field(f, group, k))
    b = rotate_field(op(f), group, k)
    d = np.abs(a - b)
    if margin:
        d = d[margin:-margin, margin:-margin]
    return _report(name, m, k, group.angles[k], None, float(d.max()), None, tol=tol)


# ---------------------------------------------------------------------------
# whole network

def network_inputs(spec: SmoothFieldSpec, seed: int, theta: float = 0.0, window_radius: float | None = None):
    """Windowed smooth ``(1, n, n, 1)`` arrays ``(I_A, I_B, F_t)`` rotated by ``theta``."""
    img = render_smooth_image(spec, seed, channels=3, theta=theta, window_radius=window_radius)
    return tuple(img[None, :, :, c:c + 1] for c in range(3))


def measure_network(model, spec: SmoothFieldSpec, seed: int, theta: float, t: int = 50,
                    m: int | None = None, margin: int = 3, dtype=np.float64,
                    window_radius: float | None = None, radius: float | None = None) -> EquivarianceReport:
    """``|model(pi_theta I) - pi_theta model(I)|`` over the interior disk.

    The rotated input is rendered analytically; the output side is resampled
    bilinearly unless ``theta`` is a multiple of a quarter turn.  ``radius``
    (physical units) replaces the pixel-margin disk; it should sit well inside
    ``window_radius`` because the network sharpens the taper's edge.
    """
    I0 = [x.astype(dtype) for x in network_inputs(spec, seed, window_radius=window_radius)]
    I1 = [x.astype(dtype) for x in network_inputs(spec, seed, theta, window_radius=window_radius)]
    tt = np.array([t])
    out0 = np.asarray(model(*I0, tt), dtype=np.float64)[0]
    out1 = np.asarray(model(*I1, tt), dtype=np.float64)[0]
    q = theta / (np.pi / 2)
    if abs(q - round(q)) < 1e-12:
        moved = np.rot90(out0, int(round(q)) % 4, axes=(0, 1))
        mask = np.ones(out0.shape[:2], dtype=bool)
    else:
        moved = rotate_image_arbitrary(out0, theta)
        mask = interior_mask(spec.size, margin, disk=True)
    if radius is not None:
        x1, x2 = grid_coords(spec.size, spec.delta)
        mask = mask & (np.hypot(x1, x2) <= radius)
    err = float(np.abs(out1 - moved)[mask].max())
    k = None
    if m is not None:
        kk = theta * m / (2 * np.pi)
        k = int(round(kk)) if abs(kk - round(kk)) < 1e-9 else None
    return _report("network", m or 0, k, theta, spec.delta, err, None, tol=np.inf,
                   extra={"max_output": float(np.abs(out0).max())})


def network_equivariance_error(model, I_A, I_B, F_t, t, k: int) -> float:
    """Exact quarter-turn check on arbitrary batched planar inputs ``(N, H, W, 1)``."""
    rot = lambda x: np.rot90(x, k, axes=(1, 2))  # noqa: E731
    out = model(I_A, I_B, F_t, t)
    out_r = model(rot(I_A), rot(I_B), rot(F_t), t)
    return float(np.abs(out_r - rot(out)).max())


def scaling_fit(deltas, errors, exact_tol: float = 1e-12):
    """Least-squares slope of ``log(error)`` against ``log(delta)``; ``"exact"`` if every error vanishes."""
    deltas = np.asarray(deltas, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if len(deltas) < 3:
        raise ValueError("need at least three mesh sizes")
    if np.all(errors <= exact_tol):
        return "exact"
    if np.any(errors <= 0):
        raise ValueError("some but not all errors are zero; slope undefined")
    slope, _ = np.polyfit(np.log(deltas), np.log(errors), 1)
    return float(slope)


def error_map(model, I_A, I_B, k: int, seed: int = 0, t: int = 50, m: int = 4):
    """Fig.-6 style triplet for one image pair ``(H, W, 1)`` and group element ``k`` of ``C_m``.

    Returns ``(output on rotated input, rotated output, |difference| scaled to [0, 1], max difference)``.
    The noisy-target input is drawn from ``seed`` and rotated along with the sources.
    """
    group = RotationGroup(m)
    rng = np.random.default_rng(seed)
    F_t = rng.standard_normal(np.shape(I_A)).astype(np.asarray(I_A).dtype)
    tt = np.array([t])
    rot = lambda x: rotate_image(x, group, k)  # noqa: E731
    out = model(I_A[None], I_B[None], F_t[None], tt)[0]
    out_rot_in = model(rot(I_A)[None], rot(I_B)[None], rot(F_t)[None], tt)[0]
    transported = rot(out)
    diff = np.abs(out_rot_in - transported)
    mx = float(diff.max())
    scaled = diff / mx if mx > 0 else diff
    return out_rot_in, transported, scaled, mx
