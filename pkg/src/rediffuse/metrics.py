"""Fusion quality metrics: MS-SSIM, normalized mutual information (QMI) and Qabf.

All functions take 2-D float arrays in [0, 1].
"""
from __future__ import annotations

import logging
import math

import numpy as np
from scipy import ndimage, signal

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03
_WIN_HALF = 5  # 11-tap window


def _plane(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {x.shape}")
    return x


def _gauss(x):
    return ndimage.gaussian_filter(x, sigma=1.5, mode="reflect", truncate=_WIN_HALF / 1.5)


def _ssim_terms(x, y, data_range=1.0):
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mx, my = _gauss(x), _gauss(y)
    sxx = _gauss(x * x) - mx * mx
    syy = _gauss(y * y) - my * my
    sxy = _gauss(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim_min_size(scales: int) -> int:
    return (_WIN_HALF + 1) * 2 ** (scales - 1)


def ms_ssim(fused, ref, scales: int = 3) -> float:
    """Multi-scale SSIM with an 11-tap sigma=1.5 Gaussian window.

    Windows are applied with reflected borders rather than 'valid' cropping so
    that the coarsest scale of a 32x32 image is still admissible.  The standard
    five-scale weights are truncated to ``scales`` and renormalized.
    """
    x, y = _plane(fused), _plane(ref)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
    need = ms_ssim_min_size(scales)
    if min(x.shape) < need:
        raise ValueError(f"image {x.shape[0]}x{x.shape[1]} too small for {scales}-scale MS-SSIM; "
                         f"need at least {need}x{need}")
    w = np.array(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    value = 1.0
    for s in range(scales):
        ssim, cs = _ssim_terms(x, y)
        term = ssim if s == scales - 1 else cs
        value *= max(term, 0.0) ** w[s]
        if s < scales - 1:
            x = _downsample(x)
            y = _downsample(y)
    return float(value)


def _downsample(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def fusion_ms_ssim(fused, I_A, I_B, scales: int = 3) -> float:
    return 0.5 * (ms_ssim(fused, I_A, scales) + ms_ssim(fused, I_B, scales))


# ---------------------------------------------------------------------------
# mutual information

def _hist_index(x, bins):
    return np.clip((np.asarray(x) * bins).astype(np.int64), 0, bins - 1).ravel()


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _mi_terms(a, f, bins):
    ia, jf = _hist_index(a, bins), _hist_index(f, bins)
    joint = np.bincount(ia * bins + jf, minlength=bins * bins).reshape(bins, bins) / ia.size
    ha = _entropy(joint.sum(axis=1))
    hf = _entropy(joint.sum(axis=0))
    hj = _entropy(joint.ravel())
    return ha + hf - hj, ha, hf


def qmi(fused, I_A, I_B, bins: int = 256) -> float:
    """``2 [MI(A,F)/(H(A)+H(F)) + MI(B,F)/(H(B)+H(F))]``, range [0, 2]."""
    f, a, b = _plane(fused), _plane(I_A), _plane(I_B)
    if not (f.shape == a.shape == b.shape):
        raise ValueError("QMI needs equally sized images")
    total = 0.0
    for name, src in (("A", a), ("B", b)):
        mi, hs, hf = _mi_terms(src, f, bins)
        if hs + hf == 0:
            log.warning("QMI: source %s and fused image both constant; term set to 0", name)
            continue
        total += mi / (hs + hf)
    return 2.0 * total


# ---------------------------------------------------------------------------
# Qabf

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T.copy()
QABF_CONSTANTS = {"gamma_g": 0.9994, "kappa_g": -15.0, "sigma_g": 0.5,
                  "gamma_a": 0.9879, "kappa_a": -22.0, "sigma_a": 0.8}


def _edges(x):
    gx = signal.correlate2d(x, _SOBEL_X, mode="same")
    gy = signal.correlate2d(x, _SOBEL_Y, mode="same")
    strength = np.sqrt(gx * gx + gy * gy)
    orient = np.arctan2(gy, gx)
    return strength, orient


def _preservation(gs, as_, gf, af, normalize):
    c = QABF_CONSTANTS
    hi = np.maximum(gs, gf)
    lo = np.minimum(gs, gf)
    g_rel = np.divide(lo, hi, out=np.zeros_like(hi), where=hi > 0)
    # orientation is defined modulo pi
    d = np.abs(as_ - af) % np.pi
    d = np.minimum(d, np.pi - d)
    a_rel = 1.0 - d / (np.pi / 2)
    qg = c["gamma_g"] / (1 + np.exp(c["kappa_g"] * (g_rel - c["sigma_g"])))
    qa = c["gamma_a"] / (1 + np.exp(c["kappa_a"] * (a_rel - c["sigma_a"])))
    q = qg * qa
    if normalize:
        q = q / qabf_ceiling()
    return q


def qabf_ceiling() -> float:
    """Qabf of a perfect edge transfer under the standard sigmoid constants."""
    c = QABF_CONSTANTS
    return (c["gamma_g"] / (1 + math.exp(c["kappa_g"] * (1 - c["sigma_g"])))
            * c["gamma_a"] / (1 + math.exp(c["kappa_a"] * (1 - c["sigma_a"]))))


def qabf(fused, I_A, I_B, normalize: bool = False) -> float:
    """Edge-preservation score with Sobel gradients.

    With the standard constants a perfect transfer scores :func:`qabf_ceiling`
    (about 0.975); ``normalize=True`` rescales so that it scores exactly 1.
    """
    f, a, b = _plane(fused), _plane(I_A), _plane(I_B)
    if not (f.shape == a.shape == b.shape):
        raise ValueError("Qabf needs equally sized images")
    ga, aa = _edges(a)
    gb, ab = _edges(b)
    gf, af = _edges(f)
    qaf = _preservation(ga, aa, gf, af, normalize)
    qbf = _preservation(gb, ab, gf, af, normalize)
    den = float((ga + gb).sum())
    if den == 0:
        return 0.0
    return float((qaf * ga + qbf * gb).sum() / den)
