"""Automatic band-reliability weights.

Three per-band diagnostics are computed from the cube, converted to robust
z-scores, fused into a nonnegative outlier score ``s`` and mapped through a
logistic so that ordinary bands get weights near 1 and outliers sink to the
floor ``w_min``::

    s_b = max(z(d_corr), 0) + g_rough * max(z(d_rough), 0) + g_flat * max(z(d_flat), 0)
    w_b = w_min + (1 - w_min) * sigmoid(-alpha * (s_b - tau))

Everything here is deterministic and invariant to pixel order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cube_io import HyperCube, _atomic_write
from .errors import ConfigError, DataError, DimensionError, FormatError


@dataclass(frozen=True)
class WeightConfig:
    gamma_rough: float = 1.0
    gamma_flat: float = 1.0
    tau: float = 8.0
    alpha: float = 2.0
    w_min: float = 0.05
    eps: float = 1e-12

    def validate(self) -> "WeightConfig":
        if self.gamma_rough < 0 or self.gamma_flat < 0:
            raise ConfigError("fusion gains must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("sigmoid sharpness must be > 0")
        if not 0 <= self.w_min <= 1:
            raise ConfigError("w_min must lie in [0, 1]")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        return self


@dataclass(frozen=True)
class BandDiagnostics:
    d_corr: np.ndarray
    d_rough: np.ndarray
    d_flat: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class BandWeights:
    w: np.ndarray
    diagnostics: BandDiagnostics
    config: WeightConfig

    def __len__(self):
        return self.w.size

    def __array__(self, dtype=None, copy=None):
        return self.w if dtype is None else self.w.astype(dtype)

    def n_downweighted(self, threshold: float = 0.5) -> int:
        return int(np.count_nonzero(self.w < threshold))


def _as_matrix(cube) -> np.ndarray:
    if isinstance(cube, HyperCube):
        return cube.flat()
    Y = np.asarray(cube, dtype=np.float64)
    return Y.reshape(-1, Y.shape[-1])


def _mad(Y, axis=0):
    med = np.median(Y, axis=axis)
    return med, np.median(np.abs(Y - med), axis=axis)


def mad_scale(Y, eps: float = 1e-12) -> np.ndarray:
    """``(Y - median) / (MAD + eps)`` column by column."""
    med, mad = _mad(Y)
    return (Y - med) / (mad + eps)


def robust_standardize(cube, eps: float = 1e-12) -> np.ndarray:
    """Median/MAD standardisation per band, then exact zero mean, unit variance.

    Accepts a :class:`HyperCube` or an N x B matrix. Variances use the
    population denominator N; constant bands come out as all zeros.
    """
    Y = _as_matrix(cube)
    if Y.shape[0] < 2:
        raise DataError("need at least two pixels to standardise")
    Z = mad_scale(Y, eps)
    Z = Z - Z.mean(axis=0)
    std = np.sqrt(np.mean(Z * Z, axis=0))
    scale = np.where(std > eps, std, 1.0)
    Z = Z / scale
    Z[:, std <= eps] = 0.0
    return Z


def neighbour_corr_deficit(Z: np.ndarray) -> np.ndarray:
    """``1 - c_b`` with ``c_b`` the weaker of the band's two adjacent correlations."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise DimensionError("need an N x B matrix with B >= 2")
    rho = np.mean(Z[:, :-1] * Z[:, 1:], axis=0)
    c = np.empty(Z.shape[1])
    c[0] = rho[0]
    c[-1] = rho[-1]
    c[1:-1] = np.minimum(rho[:-1], rho[1:])
    return 1.0 - c


def spectral_roughness(cube) -> np.ndarray:
    """Absolute second difference of the median spectrum, edges copied inward."""
    Y = _as_matrix(cube)
    if Y.shape[1] < 3:
        raise DimensionError("spectral roughness needs B >= 3")
    m = np.median(Y, axis=0)
    d = np.empty_like(m)
    d[1:-1] = np.abs(m[2:] - 2.0 * m[1:-1] + m[:-2])
    d[0] = d[1]
    d[-1] = d[-2]
    return d


def spatial_flatness(cube, eps: float = 1e-12) -> np.ndarray:
    """``-log(var + eps)`` per band; large for spatially flat bands."""
    Y = _as_matrix(cube)
    if Y.shape[0] < 2:
        raise DataError("need at least two pixels for a spatial variance")
    return -np.log(np.var(Y, axis=0) + eps)


def robust_z(u, eps: float = 1e-12) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    med, mad = _mad(u)
    return (u - med) / (mad + eps)


def outlier_score(d_corr, d_rough, d_flat, cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    d_corr, d_rough, d_flat = (np.asarray(d, dtype=np.float64) for d in (d_corr, d_rough, d_flat))
    if not d_corr.shape == d_rough.shape == d_flat.shape:
        raise DimensionError("diagnostic vectors differ in length")
    pos = lambda u: np.maximum(robust_z(u, cfg.eps), 0.0)  # noqa: E731
    return pos(d_corr) + cfg.gamma_rough * pos(d_rough) + cfg.gamma_flat * pos(d_flat)


def map_weights(s, cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return cfg.w_min + (1.0 - cfg.w_min) * expit(-cfg.alpha * (s - cfg.tau))


def estimate_band_weights(cube, cfg: WeightConfig = WeightConfig()) -> BandWeights:
    """Run the full diagnostic pipeline on ``cube`` and return weights plus diagnostics."""
    cfg.validate()
    Y = _as_matrix(cube)
    if Y.shape[1] < 3:
        raise DimensionError("band weighting needs B >= 3")
    Z = robust_standardize(Y, cfg.eps)
    d_corr = neighbour_corr_deficit(Z)
    d_rough = spectral_roughness(Y)
    d_flat = spatial_flatness(Y, cfg.eps)
    s = outlier_score(d_corr, d_rough, d_flat, cfg)
    diag = BandDiagnostics(d_corr, d_rough, d_flat, s)
    return BandWeights(map_weights(s, cfg), diag, cfg)


_COLUMNS = ("d_corr", "d_rough", "d_flat", "s", "w")


def write_weights_csv(weights: BandWeights, path, wavenumbers=None) -> None:
    """One row per band: index, optional wavenumber, diagnostics, score, weight."""
    d = weights.diagnostics
    header = ["band"] + (["wavenumber"] if wavenumbers is not None else []) + list(_COLUMNS)
    cols = [d.d_corr, d.d_rough, d.d_flat, d.s, weights.w]
    lines = [",".join(header)]
    for b in range(weights.w.size):
        row = [str(b)]
        if wavenumbers is not None:
            row.append(repr(float(wavenumbers[b])))
        row += [f"{c[b]:.17g}" for c in cols]
        lines.append(",".join(row))
    cfg = ";".join(f"{k}={v!r}" for k, v in asdict(weights.config).items())
    lines.insert(0, f"# {cfg}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_weights_csv(path) -> BandWeights:
    """Inverse of :func:`write_weights_csv`."""
    lines = Path(path).read_text().splitlines()
    cfg = WeightConfig()
    if lines and lines[0].startswith("#"):
        fields = dict(item.split("=", 1) for item in lines[0][1:].strip().split(";") if item)
        cfg = WeightConfig(**{k: float(v) for k, v in fields.items()})
        lines = lines[1:]
    header = lines[0].split(",")
    if header[0] != "band" or header[-len(_COLUMNS):] != list(_COLUMNS):
        raise FormatError(f"{path}: unexpected weights header {header}")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line], ndmin=2)
    cols = {name: rows[:, header.index(name)] for name in _COLUMNS}
    diag = BandDiagnostics(cols["d_corr"], cols["d_rough"], cols["d_flat"], cols["s"])
    return BandWeights(cols["w"], diag, cfg)


def uniform_weights(n_bands: int) -> np.ndarray:
    """All-ones weights, which turn WSAD into plain SAD."""
    return np.ones(n_bands)
