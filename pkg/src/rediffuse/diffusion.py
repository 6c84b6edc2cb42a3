"""Noise schedule, forward noising, the noise-prediction loss and the mean-only sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

# model(I_A, I_B, F_t, t) -> eps prediction shaped like F_t
EpsModel = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed by ``t = 0..T``.

    Index 0 holds the empty-product conventions ``alpha_bar[0] = 1`` and
    ``beta[0] = sigma2[0] = 0`` so that ``alpha_bar[t - 1]`` is always valid.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def schedule_from_betas(betas) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size < 1:
        raise ValueError("need at least one diffusion step")
    if not np.all((b > 0) & (b < 1)):
        raise ValueError("every beta_t must lie in (0, 1)")
    beta = np.concatenate([[0.0], b])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma2 = np.zeros_like(beta)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(beta, alpha, alpha_bar, sigma2, float(b[0]), float(b[-1]))


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.05,
                  shape: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if shape != "linear":
        raise ValueError(f"unsupported schedule shape {shape!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def _per_sample(table, t, ndim):
    t = np.asarray(t)
    v = table[t]
    if t.ndim == 0:
        return float(v)
    return v.reshape(t.shape + (1,) * (ndim - t.ndim))


def forward_sample(F0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) F0 + sqrt(1 - abar_t) eps``; ``t`` may be a scalar or one per batch entry."""
    if np.shape(F0) != np.shape(eps):
        raise ValueError(f"F0 shape {np.shape(F0)} != eps shape {np.shape(eps)}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > sched.T):
        raise ValueError(f"t outside [0, {sched.T}]")
    ab = _per_sample(sched.alpha_bar, t, np.ndim(F0))
    out = np.sqrt(ab) * F0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(F0, eps), copy=False)


def reverse_step(F_t: np.ndarray, t: int, eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Mean of the reverse transition, without the noise term."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"reverse step needs 1 <= t <= {sched.T}, got {t}")
    beta = float(sched.beta[t])
    coef = beta / math.sqrt(1.0 - float(sched.alpha_bar[t]))
    out = (F_t - coef * eps_pred) / math.sqrt(float(sched.alpha[t]))
    return out.astype(F_t.dtype, copy=False)


def training_loss(model, F0, I_A, I_B, sched: NoiseSchedule, rng: np.random.Generator):
    """Noise-prediction loss ``|| eps - eps_theta ||_2`` averaged over the batch.

    ``t`` is drawn uniformly from ``{1..T}`` per sample.  If ``model`` returns a
    tape node the loss is a node too, ready for :func:`autodiff.backward`.
    """
    n = F0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(F0.shape).astype(F0.dtype)
    F_t = forward_sample(F0, t, eps, sched)
    pred = model(I_A, I_B, F_t, t)
    value = pred.value if isinstance(pred, ad.Node) else pred
    if not np.all(np.isfinite(value)):
        raise FloatingPointError("model produced non-finite noise predictions")
    if isinstance(pred, ad.Node):
        return ad.l2_loss(pred, eps)
    return float(np.sqrt(((eps - value).reshape(n, -1) ** 2).sum(axis=1)).mean())


def sample(model, I_A: np.ndarray, I_B: np.ndarray, sched: NoiseSchedule,
           rng: np.random.Generator | None = None, F_T: np.ndarray | None = None) -> np.ndarray:
    """Run the deterministic reverse chain from ``F_T`` (drawn from ``rng`` if not given).

    Returns ``F_0`` clamped to ``[0, 1]``.
    """
    if F_T is None:
        if rng is None:
            raise ValueError("need either rng or F_T")
        F_T = rng.standard_normal(I_A.shape).astype(I_A.dtype)
    F = F_T
    n = F.shape[0]
    for t in range(sched.T, 0, -1):
        eps = model(I_A, I_B, F, np.full(n, t))
        F = reverse_step(F, t, eps, sched)
    return np.clip(F, 0.0, 1.0)


def dc_anchor(model, sched: NoiseSchedule):
    """Wrap ``model`` so the spatial mean of its prediction is set in closed form.

    Defocus blur keeps the mean brightness, so ``mean(F_0)`` is estimated by the
    mean of the two sources and the noise mean follows from ``F_t`` exactly.  A
    network trained on the plain loss barely learns this one direction (it is
    ``1/(H W)`` of the loss), yet the mean-only chain scales any error in it by
    ``1/sqrt(abar_T)``.  Spatial means are rotation invariant, so the wrapper
    keeps equivariance.
    """

    def anchored(I_A, I_B, F_t, t):
        pred = model(I_A, I_B, F_t, t)
        axes = tuple(range(1, F_t.ndim))
        ab = _per_sample(sched.alpha_bar, t, F_t.ndim)
        ref = 0.5 * (np.mean(I_A, axis=axes, keepdims=True) + np.mean(I_B, axis=axes, keepdims=True))
        dc = (np.mean(F_t, axis=axes, keepdims=True) - np.sqrt(ab) * ref) / np.sqrt(1.0 - ab)
        dc = dc.astype(np.asarray(F_t).dtype)
        if isinstance(pred, ad.Node):
            return ad.add(ad.center(pred), dc)
        return pred - pred.mean(axis=axes, keepdims=True) + dc

    return anchored


def oracle_model(F0: np.ndarray, sched: NoiseSchedule) -> EpsModel:
    """Noise predictor that knows the clean target: recovers ``eps`` exactly from ``F_t``."""

    def model(I_A, I_B, F_t, t):
        ab = _per_sample(sched.alpha_bar, t, F_t.ndim)
        return (F_t - np.sqrt(ab) * F0) / np.sqrt(1.0 - ab)

    return model
