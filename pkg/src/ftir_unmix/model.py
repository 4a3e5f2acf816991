"""Patch-wise convolutional autoencoder for spectral unmixing.

Encoder: conv 3x3 -> batch norm -> leaky ReLU -> spatial dropout, then
conv 1x1 -> batch norm -> leaky ReLU -> spatial dropout, then a scaled
softmax over the K channels so every pixel's abundance vector lies on the
simplex.

Decoder: a single bias-free p x p convolution from K abundance channels to B
bands whose kernel is ``softplus(U)``, so all mixing weights are positive.
The endmember matrix is the sum of the kernel's spatial slices.

Arrays are kept channel-last internally (``n, p, p, channels``); the public
functions accept and return the channel-first layout ``B x p x p`` /
``K x p x p``. All convolutions are cross-correlations with zero padding
that preserves the patch size.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .cube_io import HyperCube, _atomic_write
from .errors import ConfigError, DimensionError, FormatError, InitError, LengthError

INIT_FLOOR = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    n_endmembers: int
    patch_size: int = 5
    hidden: int = 64
    alpha: float = 5.0
    leaky_slope: float = 0.02
    dropout: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> "ModelConfig":
        if self.bands < 1:
            raise ConfigError("bands must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch size must be odd, got {self.patch_size}")
        if self.n_endmembers < 2:
            raise ConfigError("need at least 2 endmembers")
        if self.hidden < self.n_endmembers:
            raise ConfigError("hidden channels must be >= number of endmembers")
        if not self.alpha > 0:
            raise ConfigError("softmax sharpness must be > 0")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky slope must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if not self.bn_eps > 0 or not 0 < self.bn_momentum <= 1:
            raise ConfigError("invalid batch-norm settings")
        return self


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # C x B x 3 x 3
    conv1_b: np.ndarray
    bn1_gamma: np.ndarray
    bn1_beta: np.ndarray
    bn1_mean: np.ndarray
    bn1_var: np.ndarray
    conv2_w: np.ndarray  # K x C x 1 x 1
    conv2_b: np.ndarray
    bn2_gamma: np.ndarray
    bn2_beta: np.ndarray
    bn2_mean: np.ndarray
    bn2_var: np.ndarray
    dec_u: np.ndarray  # B x K x p x p, decoder kernel before softplus

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})


LEARNABLE = tuple(n for n in ModelParams.names() if not n.endswith(("_mean", "_var")))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    B, K, p, C = cfg.bands, cfg.n_endmembers, cfg.patch_size, cfg.hidden
    return {
        "conv1_w": (C, B, 3, 3), "conv1_b": (C,),
        "bn1_gamma": (C,), "bn1_beta": (C,), "bn1_mean": (C,), "bn1_var": (C,),
        "conv2_w": (K, C, 1, 1), "conv2_b": (K,),
        "bn2_gamma": (K,), "bn2_beta": (K,), "bn2_mean": (K,), "bn2_var": (K,),
        "dec_u": (B, K, p, p),
    }


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_params(cfg: ModelConfig, cube: HyperCube, seed: int = 0) -> ModelParams:
    """Initial parameters.

    Convolutions use ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``. The decoder's
    centre slice reproduces K distinct randomly chosen pixel spectra (floored
    at 1e-3); every other slice is ``softplus^-1(1e-3)``.
    """
    cfg.validate()
    if cube.bands != cfg.bands:
        raise DimensionError(f"cube has {cube.bands} bands, config expects {cfg.bands}")
    Y = cube.flat()
    if cfg.n_endmembers > Y.shape[0]:
        raise InitError(f"cannot pick {cfg.n_endmembers} distinct pixels from {Y.shape[0]}")
    rng = np.random.default_rng(seed)
    B, K, p, C = cfg.bands, cfg.n_endmembers, cfg.patch_size, cfg.hidden
    b1, b2 = 1.0 / np.sqrt(9 * B), 1.0 / np.sqrt(C)
    pixels = rng.choice(Y.shape[0], size=K, replace=False)
    dec_u = np.full((B, K, p, p), inverse_softplus(INIT_FLOOR))
    r = p // 2
    dec_u[:, :, r, r] = inverse_softplus(np.maximum(Y[pixels].T, INIT_FLOOR))
    return ModelParams(
        conv1_w=rng.uniform(-b1, b1, (C, B, 3, 3)),
        conv1_b=rng.uniform(-b1, b1, C),
        bn1_gamma=np.ones(C), bn1_beta=np.zeros(C), bn1_mean=np.zeros(C), bn1_var=np.ones(C),
        conv2_w=rng.uniform(-b2, b2, (K, C, 1, 1)),
        conv2_b=rng.uniform(-b2, b2, K),
        bn2_gamma=np.ones(K), bn2_beta=np.zeros(K), bn2_mean=np.zeros(K), bn2_var=np.ones(K),
        dec_u=dec_u,
    )


def endmembers(params: ModelParams, cfg: ModelConfig | None = None) -> np.ndarray:
    """B x K endmember matrix: sum over spatial offsets of ``softplus(U)``."""
    return softplus(params.dec_u).sum(axis=(2, 3))


# -- batched forward / backward ------------------------------------------------


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool


@dataclass
class ForwardCache:
    """Everything the backward pass needs, plus the outputs."""

    xpad: np.ndarray  # input, zero padded by 1, channel-last
    bn1: _BNCache
    pre1: np.ndarray
    mask1: np.ndarray | None
    z1: np.ndarray
    bn2: _BNCache
    pre2: np.ndarray
    mask2: np.ndarray | None
    abundances: np.ndarray  # n x p x p x K
    cols_a: np.ndarray
    kernel: np.ndarray  # (K*p*p) x B, softplus(U) as a matrix
    recon: np.ndarray  # n x p x p x B
    running: dict[str, np.ndarray]


def _check_patches(cfg: ModelConfig, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.dtype != np.longdouble:
        X = X.astype(np.float64)
    p = cfg.patch_size
    if X.ndim != 4 or X.shape[1:] != (cfg.bands, p, p):
        raise DimensionError(f"expected patches of shape (n, {cfg.bands}, {p}, {p}), got {X.shape}")
    return X


def _batch_norm(y, gamma, beta, mean, var, eps, batch_stats):
    if batch_stats:
        mean, var = y.mean(axis=0), y.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (y - mean) * inv_std
    return gamma * xhat + beta, _BNCache(xhat, inv_std, batch_stats), mean, var


def _batch_norm_backward(dout, gamma, cache: _BNCache):
    dgamma = np.sum(dout * cache.xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dxhat = dout * gamma
    if not cache.batch_stats:
        return dxhat * cache.inv_std, dgamma, dbeta
    m = dout.shape[0]
    dy = (cache.inv_std / m) * (
        m * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
    )
    return dy, dgamma, dbeta


def dropout_masks(cfg: ModelConfig, n: int, rng: np.random.Generator):
    """Per-sample channel masks for both encoder stages, survivors scaled by 1/(1-rate)."""
    if cfg.dropout == 0:
        return None, None
    keep = 1.0 - cfg.dropout
    m1 = (rng.random((n, cfg.hidden)) < keep) / keep
    m2 = (rng.random((n, cfg.n_endmembers)) < keep) / keep
    return m1, m2


def _expand_mask(mask, pixels):
    # (n, ch) -> (n * pixels, ch), one row per pixel
    return np.repeat(mask, pixels, axis=0)


def encoder_forward(params: ModelParams, cfg: ModelConfig, xl: np.ndarray,
                    batch_stats: bool = False, masks=(None, None)):
    """Encoder on channel-last images ``xl`` (n x h x w x B) of any spatial size.

    Returns ``(abundances, cache_parts, batch_moments)`` with abundances
    shaped n x h x w x K. Dropout masks are per (sample, channel).
    """
    n, h, w = xl.shape[:3]
    K, C, slope = cfg.n_endmembers, cfg.hidden, cfg.leaky_slope
    xpad = np.pad(xl, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # 3x3 convolution as nine shifted matrix products
    taps = np.ascontiguousarray(params.conv1_w.transpose(2, 3, 1, 0))  # 3 x 3 x B x C
    y1 = np.broadcast_to(params.conv1_b, (n * h * w, C)).copy()
    for du in range(3):
        for dv in range(3):
            shifted = xpad[:, du:du + h, dv:dv + w, :].reshape(n * h * w, -1)
            y1 += shifted @ taps[du, dv]
    n1, bn1, mean1, var1 = _batch_norm(y1, params.bn1_gamma, params.bn1_beta, params.bn1_mean,
                                       params.bn1_var, cfg.bn_eps, batch_stats)
    z1 = np.where(n1 > 0, n1, slope * n1)
    m1, m2 = masks
    if m1 is not None:
        z1 = z1 * _expand_mask(m1, h * w)
    y2 = z1 @ params.conv2_w.reshape(K, C).T + params.conv2_b
    n2, bn2, mean2, var2 = _batch_norm(y2, params.bn2_gamma, params.bn2_beta, params.bn2_mean,
                                       params.bn2_var, cfg.bn_eps, batch_stats)
    z2 = np.where(n2 > 0, n2, slope * n2)
    if m2 is not None:
        z2 = z2 * _expand_mask(m2, h * w)
    logits = cfg.alpha * z2
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    a = ex / ex.sum(axis=1, keepdims=True)
    parts = (xpad, bn1, n1, m1, z1, bn2, n2, m2)
    return a.reshape(n, h, w, K), parts, (mean1, var1, mean2, var2)


def forward(params: ModelParams, cfg: ModelConfig, X: np.ndarray, batch_stats: bool = False,
            masks=(None, None)) -> ForwardCache:
    """Run encoder and decoder on a batch of patches ``X`` (n x B x p x p).

    ``batch_stats`` selects batch normalisation with batch statistics
    (training) instead of the running statistics. ``masks`` are fixed
    dropout masks from :func:`dropout_masks`; ``None`` disables dropout.
    The returned cache carries the updated running statistics without
    touching ``params``.
    """
    X = _check_patches(cfg, X)
    n, p = X.shape[0], cfg.patch_size
    abundances, parts, (mean1, var1, mean2, var2) = encoder_forward(
        params, cfg, X.transpose(0, 2, 3, 1), batch_stats, masks)
    cols_a, kernel = _decoder_columns(abundances, params.dec_u, p)
    recon = (cols_a @ kernel).reshape(n, p, p, cfg.bands)

    running = {}
    if batch_stats:
        mom = cfg.bn_momentum
        m = n * p * p
        unbias = m / (m - 1) if m > 1 else 1.0
        running = {
            "bn1_mean": (1 - mom) * params.bn1_mean + mom * mean1,
            "bn1_var": (1 - mom) * params.bn1_var + mom * var1 * unbias,
            "bn2_mean": (1 - mom) * params.bn2_mean + mom * mean2,
            "bn2_var": (1 - mom) * params.bn2_var + mom * var2 * unbias,
        }
    return ForwardCache(*parts, abundances, cols_a, kernel, recon, running)


def _decoder_columns(abundances, dec_u, p):
    n, K = abundances.shape[0], abundances.shape[-1]
    r = p // 2
    apad = np.pad(abundances, ((0, 0), (r, r), (r, r), (0, 0)))
    cols = sliding_window_view(apad, (p, p), axis=(1, 2)).reshape(n * p * p, K * p * p)
    kernel = softplus(dec_u).reshape(dec_u.shape[0], -1).T
    return cols, kernel


def backward(params: ModelParams, cfg: ModelConfig, cache: ForwardCache,
             d_recon: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every learnable tensor.

    ``d_recon`` is the loss derivative with respect to the reconstruction,
    shaped like ``cache.recon``.
    """
    n, p = cache.abundances.shape[0], cache.abundances.shape[1]
    K, C, B, slope = cfg.n_endmembers, cfg.hidden, cfg.bands, cfg.leaky_slope
    r = p // 2
    dr = d_recon.reshape(n * p * p, B)

    d_kernel = cache.cols_a.T @ dr
    d_u = d_kernel.T.reshape(B, K, p, p) * expit(params.dec_u)
    d_cols = (dr @ cache.kernel.T).reshape(n, p, p, K, p, p)
    d_apad = np.zeros((n, 2 * p - 1, 2 * p - 1, K))
    for u in range(p):
        for v in range(p):
            d_apad[:, u:u + p, v:v + p, :] += d_cols[..., u, v]
    da = d_apad[:, r:r + p, r:r + p, :].reshape(n * p * p, K)

    a = cache.abundances.reshape(n * p * p, K)
    dz2 = cfg.alpha * a * (da - np.sum(da * a, axis=1, keepdims=True))
    if cache.mask2 is not None:
        dz2 = dz2 * _expand_mask(cache.mask2, p * p)
    dn2 = np.where(cache.pre2 > 0, dz2, slope * dz2)
    dy2, g_bn2_gamma, g_bn2_beta = _batch_norm_backward(dn2, params.bn2_gamma, cache.bn2)
    g_conv2_w = (dy2.T @ cache.z1).reshape(K, C, 1, 1)
    g_conv2_b = dy2.sum(axis=0)
    dz1 = dy2 @ params.conv2_w.reshape(K, C)
    if cache.mask1 is not None:
        dz1 = dz1 * _expand_mask(cache.mask1, p * p)
    dn1 = np.where(cache.pre1 > 0, dz1, slope * dz1)
    dy1, g_bn1_gamma, g_bn1_beta = _batch_norm_backward(dn1, params.bn1_gamma, cache.bn1)
    g_conv1_w = np.empty((C, B, 3, 3))
    for du in range(3):
        for dv in range(3):
            shifted = cache.xpad[:, du:du + p, dv:dv + p, :].reshape(n * p * p, B)
            g_conv1_w[:, :, du, dv] = dy1.T @ shifted
    g_conv1_b = dy1.sum(axis=0)
    return {
        "conv1_w": g_conv1_w, "conv1_b": g_conv1_b,
        "bn1_gamma": g_bn1_gamma, "bn1_beta": g_bn1_beta,
        "conv2_w": g_conv2_w, "conv2_b": g_conv2_b,
        "bn2_gamma": g_bn2_gamma, "bn2_beta": g_bn2_beta,
        "dec_u": d_u,
    }


# -- single-patch API ---------------------------------------------------------


def encode(params: ModelParams, cfg: ModelConfig, patch: np.ndarray, mode: str = "eval",
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Abundance patch (K x p x p) for one input patch (B x p x p).

    ``mode="train"`` normalises with the patch's own statistics, applies
    spatial dropout drawn from ``rng`` and updates the running statistics
    in ``params`` in place. ``mode="eval"`` is deterministic and leaves
    ``params`` untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    patch = np.asarray(patch, dtype=np.float64)
    train = mode == "train"
    masks = (None, None)
    if train:
        masks = dropout_masks(cfg, 1, rng if rng is not None else np.random.default_rng())
    cache = forward(params, cfg, patch[None], batch_stats=train, masks=masks)
    for name, value in cache.running.items():
        setattr(params, name, value)
    return cache.abundances[0].transpose(2, 0, 1)


def decode(params: ModelParams, cfg: ModelConfig, A: np.ndarray) -> np.ndarray:
    """Reconstruct a B x p x p patch from a K x p x p abundance patch."""
    A = np.asarray(A, dtype=np.float64)
    p = cfg.patch_size
    if A.shape != (cfg.n_endmembers, p, p):
        raise DimensionError(f"expected abundances of shape ({cfg.n_endmembers}, {p}, {p}), got {A.shape}")
    cols, kernel = _decoder_columns(A.transpose(1, 2, 0)[None], params.dec_u, p)
    return (cols @ kernel).reshape(p, p, cfg.bands).transpose(2, 0, 1)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"FTCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIII5d")


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    """Binary checkpoint: header with the model config, then every tensor as f64 LE.

    Layout: magic ``FTCK``, u32 version, u32 B, K, p, C, f64 alpha,
    leaky slope, dropout, BN epsilon, BN momentum, then the tensors of
    :class:`ModelParams` in declaration order, C-contiguous.
    """
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.bands, cfg.n_endmembers, cfg.patch_size,
        cfg.hidden, cfg.alpha, cfg.leaky_slope, cfg.dropout, cfg.bn_eps, cfg.bn_momentum,
    )
    shapes = param_shapes(cfg)
    body = []
    for name, value in params.arrays().items():
        if value.shape != shapes[name]:
            raise DimensionError(f"{name} has shape {value.shape}, expected {shapes[name]}")
        body.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    _atomic_write(Path(path), header + b"".join(body))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: not a model checkpoint")
    magic, version, B, K, p, C, alpha, slope, drop, eps, mom = _CKPT_HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig(B, K, p, C, alpha, slope, drop, eps, mom).validate()
    shapes = param_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != _CKPT_HEADER.size + 8 * total:
        raise LengthError(f"{path}: checkpoint payload size does not match its config")
    offset = _CKPT_HEADER.size
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, "<f8", count, offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return ModelParams(**arrays), cfg


def config_dict(cfg) -> dict:
    return asdict(cfg)
