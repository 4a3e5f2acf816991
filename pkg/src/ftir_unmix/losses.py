"""Spectral angle losses.

All functions reduce over the last axis, so they accept single spectra as
well as stacks of spectra.
"""

import numpy as np

LOSS_EPS = 1e-9
# derivative of arccos diverges at +-1; the gradient uses a clamped cosine
GRAD_CLAMP = 1e-7


def _cosine(x, y, eps):
    dot = np.sum(x * y, axis=-1)
    nx = np.sqrt(np.sum(x * x, axis=-1))
    ny = np.sqrt(np.sum(y * y, axis=-1))
    return dot, nx, ny, dot / np.maximum(nx * ny, eps)


def _angle(x, y, nx, ny, eps):
    # half-angle form of arccos(cos): same value, but no loss of accuracy near 0 and pi
    ux = x / np.maximum(nx, eps)[..., None]
    uy = y / np.maximum(ny, eps)[..., None]
    diff = np.sqrt(np.sum((ux - uy) ** 2, axis=-1))
    total = np.sqrt(np.sum((ux + uy) ** 2, axis=-1))
    angle = 2.0 * np.arctan2(diff, total)
    return np.where((nx > eps) & (ny > eps), angle, np.pi / 2)


def sad(x, x_hat, eps=LOSS_EPS):
    """Spectral angle distance in radians, in [0, pi].

    ``eps`` guards the norm product in the cosine. A zero vector on either
    side yields pi/2 (cosine 0) instead of NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape[-1] != x_hat.shape[-1]:
        raise ValueError(f"band count mismatch: {x.shape[-1]} vs {x_hat.shape[-1]}")
    _, nx, ny, _ = _cosine(x, x_hat, eps)
    return _angle(x, x_hat, nx, ny, eps)


def wsad(x, x_hat, w, eps=LOSS_EPS):
    """Spectral angle after multiplying both spectra elementwise by ``w``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape[-1] != x.shape[-1]:
        raise ValueError(f"weight vector has {w.shape[-1]} bands, spectra have {x.shape[-1]}")
    return sad(w * x, w * np.asarray(x_hat, dtype=np.float64), eps)


def wsad_and_grad(x, x_hat, w, eps=LOSS_EPS):
    """Per-spectrum WSAD and its derivative with respect to ``x_hat``.

    Returns
    -------
    angle : ndarray, shape x.shape[:-1]
    d_angle : ndarray, shape x.shape
        Derivative of each angle with respect to the matching ``x_hat`` row.
    """
    xw = w * x
    yw = w * x_hat
    dot, nx, ny, cos = _cosine(xw, yw, eps)
    angle = _angle(xw, yw, nx, ny, eps)
    clamped = np.clip(cos, GRAD_CLAMP - 1.0, 1.0 - GRAD_CLAMP)
    d_cos = -1.0 / np.sqrt(1.0 - clamped * clamped)
    denom = np.maximum(nx * ny, eps)
    safe_ny = np.where(ny > 0, ny, 1.0)
    # d cos / d yw = xw / denom - dot * nx * yw / (ny * denom^2)
    d_yw = xw / denom[..., None] - (dot * nx / (safe_ny * denom * denom))[..., None] * yw
    return angle, (d_cos[..., None] * d_yw) * w
