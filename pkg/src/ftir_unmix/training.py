"""Patch sampling, loss gradients, Adam and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cube_io import HyperCube
from .errors import ConfigError, DimensionError, NumericalError
from .losses import LOSS_EPS, wsad_and_grad
from .model import (
    LEARNABLE,
    ModelConfig,
    ModelParams,
    backward as model_backward,
    dropout_masks,
    encoder_forward,
    forward,
    init_params,
)

LOSS_KINDS = ("sad", "wsad")
_SAMPLE_STREAM, _TRAIN_STREAM = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    num_patches: int = 20000
    patch_size: int = 5
    batch_size: int = 64
    epochs: int = 500
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    loss: str = "wsad"
    deterministic: bool = False
    center_only: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.num_patches < 1:
            raise ConfigError("number of patches must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps_adam > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch size must be odd")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        return self


@dataclass
class PatchBatch:
    patches: np.ndarray  # n x B x p x p
    centers: np.ndarray  # n x 2, (row, col) of each patch centre

    def __len__(self):
        return self.patches.shape[0]


class PatchSet:
    """Sampled patch centres over one cube; batches are cut out on demand."""

    def __init__(self, cube: HyperCube, centers: np.ndarray, p: int):
        self.cube = cube
        self.centers = centers
        self.p = p
        # windows[i, j] is the B x p x p patch whose top-left corner is (i, j)
        self._windows = sliding_window_view(cube.data, (p, p), axis=(0, 1))

    def __len__(self):
        return self.centers.shape[0]

    def batch(self, index) -> PatchBatch:
        c = self.centers[index]
        r = self.p // 2
        return PatchBatch(np.ascontiguousarray(self._windows[c[:, 0] - r, c[:, 1] - r]), c)


def sample_patches(cube: HyperCube, n: int, p: int, seed: int = 0) -> PatchSet:
    """``n`` patch centres drawn uniformly, with replacement, from the interior."""
    if cube.height < p or cube.width < p:
        raise DimensionError(f"cube {cube.height}x{cube.width} is smaller than the {p}x{p} patch")
    rng = np.random.default_rng([seed, _SAMPLE_STREAM])
    r = p // 2
    rows = rng.integers(r, cube.height - r, size=n)
    cols = rng.integers(r, cube.width - r, size=n)
    return PatchSet(cube, np.stack([rows, cols], axis=1), p)


def _weights(w, bands):
    if w is None:
        return np.ones(bands)
    w = np.asarray(w)
    if w.dtype != np.longdouble:
        w = w.astype(np.float64)
    if w.shape != (bands,):
        raise DimensionError(f"weight vector has shape {w.shape}, expected ({bands},)")
    return w


def _loss_and_seed(cache, X, w, center_only):
    """Mean WSAD over the chosen pixels and its derivative w.r.t. the reconstruction."""
    target = X.transpose(0, 2, 3, 1)
    angle, d_angle = wsad_and_grad(target, cache.recon, w, LOSS_EPS)
    if center_only:
        r = X.shape[2] // 2
        keep = np.zeros(angle.shape, dtype=bool)
        keep[:, r, r] = True
    else:
        keep = np.ones(angle.shape, dtype=bool)
    count = keep.sum()
    loss = angle[keep].sum() / count  # keeps the input precision
    return loss, d_angle * (keep[..., None] / count)


def batch_loss(params: ModelParams, cfg: ModelConfig, batch, w=None, batch_stats: bool = True,
               masks=(None, None), center_only: bool = False) -> float:
    """Mean WSAD (radians) over every pixel of every patch in ``batch``.

    ``w=None`` is plain SAD. ``batch_stats`` and ``masks`` fix the
    batch-norm mode and dropout draw, as in :func:`backward`.
    """
    X = batch.patches if isinstance(batch, PatchBatch) else np.asarray(batch, dtype=np.float64)
    cache = forward(params, cfg, X, batch_stats, masks)
    return _loss_and_seed(cache, X, _weights(w, cfg.bands), center_only)[0]


def backward(params: ModelParams, cfg: ModelConfig, batch, w=None, batch_stats: bool = True,
             masks=(None, None), center_only: bool = False):
    """Loss value, gradients of every learnable tensor, and the updated running stats."""
    X = batch.patches if isinstance(batch, PatchBatch) else np.asarray(batch, dtype=np.float64)
    cache = forward(params, cfg, X, batch_stats, masks)
    loss, seed = _loss_and_seed(cache, X, _weights(w, cfg.bands), center_only)
    grads = model_backward(params, cfg, cache, seed)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    return float(loss), grads, cache.running


def finite_diff_grad(params: ModelParams, cfg: ModelConfig, batch, w=None, h: float = 1e-5,
                     batch_stats: bool = False, masks=(None, None), center_only: bool = False,
                     loss_fn=None, extended: bool = True):
    """Central-difference gradient of the batch loss for every learnable scalar.

    The loss must be a pure function of the parameters, so dropout masks
    are passed in fixed and batch norm uses the stored statistics unless
    ``batch_stats`` is set. ``loss_fn(params)`` overrides the loss.

    With ``extended`` the loss is evaluated in ``np.longdouble``. In double
    precision the rounding noise of an O(1) loss divided by ``2h`` is about
    1e-11, which swamps gradients near zero; extended precision (where the
    platform has it) pushes that noise below 1e-14.
    """
    dtype = np.longdouble if extended else np.float64
    X = batch.patches if isinstance(batch, PatchBatch) else batch
    X = np.asarray(X).astype(dtype)
    w = None if w is None else np.asarray(w).astype(dtype)
    masks = tuple(None if m is None else np.asarray(m).astype(dtype) for m in masks)
    if loss_fn is None:
        def loss_fn(q):
            return batch_loss(q, cfg, X, w, batch_stats, masks, center_only)
    work = ModelParams(**{k: v.astype(dtype) for k, v in params.arrays().items()})
    grads = {}
    for name in LEARNABLE:
        arr = getattr(work, name)
        g = np.empty(arr.shape)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            flat[i] = orig - h
            down = loss_fn(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def freeze_batch_stats(params: ModelParams, cfg: ModelConfig, X) -> ModelParams:
    """Copy of ``params`` whose stored BN statistics are the population moments of ``X``.

    Normalising with these frozen moments reproduces the training-mode
    activations of ``X`` while making the loss a pure function of the
    learnable tensors, which is what the finite-difference oracle needs.
    """
    X = np.asarray(X, dtype=np.float64)
    q = params.copy()
    _, _, (mean1, var1, mean2, var2) = encoder_forward(
        q, cfg, X.transpose(0, 2, 3, 1), batch_stats=True)
    q.bn1_mean, q.bn1_var, q.bn2_mean, q.bn2_var = mean1, var1, mean2, var2
    return q


@dataclass
class GradCheckResult:
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def gradcheck(cfg: ModelConfig, batch_size: int = 2, loss: str = "sad", h: float = 1e-5,
              seed: int = 0) -> GradCheckResult:
    """Compare :func:`backward` with :func:`finite_diff_grad` on a random problem.

    Inputs, parameters, weights (for WSAD) and dropout masks are random;
    batch norm runs on frozen batch statistics.
    """
    rng = np.random.default_rng(seed)
    p = cfg.patch_size
    X = rng.uniform(0.05, 1.0, (batch_size, cfg.bands, p, p))
    cube = HyperCube(rng.uniform(0.05, 1.0, (p, p, cfg.bands)))
    params = init_params(cfg, cube, seed)
    # move away from the init so every tensor carries generic values
    for name in ("bn1_gamma", "bn2_gamma"):
        setattr(params, name, rng.uniform(0.5, 1.5, getattr(params, name).shape))
    for name in ("bn1_beta", "bn2_beta"):
        setattr(params, name, rng.uniform(-0.5, 0.5, getattr(params, name).shape))
    # generic decoder values: at the init floor softplus' ~ 1e-3 and the true
    # gradients fall below what central differences can resolve
    params.dec_u = rng.uniform(-1.0, 1.0, params.dec_u.shape)
    params = freeze_batch_stats(params, cfg, X)
    w = rng.uniform(0.05, 1.0, cfg.bands) if loss == "wsad" else None
    masks = dropout_masks(cfg, batch_size, rng)
    _, analytic, _ = backward(params, cfg, X, w, batch_stats=False, masks=masks)
    numeric = finite_diff_grad(params, cfg, X, w, h, batch_stats=False, masks=masks)
    return GradCheckResult({k: relative_error(analytic[k], numeric[k]) for k in LEARNABLE})


# -- optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(getattr(params, k)) for k in LEARNABLE},
                   {k: np.zeros_like(getattr(params, k)) for k in LEARNABLE})


def adam_step(state: AdamState, params, grads: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    ``params`` may be a :class:`ModelParams` or a plain dict of arrays; only
    keys present in ``grads`` are updated.
    """
    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    get = params.get if isinstance(params, dict) else lambda k: getattr(params, k)
    new = {}
    for k, g in grads.items():
        m[k] = beta1 * m[k] + (1 - beta1) * g
        v[k] = beta2 * v[k] + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1 ** t)
        v_hat = v[k] / (1 - beta2 ** t)
        new[k] = get(k) - lr * m_hat / (np.sqrt(v_hat) + eps)
    if isinstance(params, dict):
        out = {**params, **new}
    else:
        out = replace(params, **new)
    return out, AdamState(m, v, t)


# -- training loop --------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")


def train(cube: HyperCube, mcfg: ModelConfig, tcfg: TrainConfig, w=None,
          params: ModelParams | None = None, callback=None):
    """Fit the autoencoder to ``cube``.

    Runs ``epochs x ceil(num_patches / batch_size)`` Adam steps over
    shuffled batches of a fixed patch sample. ``w`` is required for WSAD
    and ignored for SAD. ``callback(epoch, loss)`` is called after every
    epoch. Returns ``(params, history)``.
    """
    tcfg.validate()
    mcfg.validate()
    if mcfg.patch_size != tcfg.patch_size:
        raise ConfigError("model and training patch sizes differ")
    if tcfg.loss == "wsad":
        if w is None:
            raise ConfigError("WSAD training needs band weights")
        w = _weights(w, mcfg.bands)
    else:
        w = None
    start = time.perf_counter()
    patches = sample_patches(cube, tcfg.num_patches, tcfg.patch_size, tcfg.seed)
    if params is None:
        params = init_params(mcfg, cube, tcfg.seed)
    rng = np.random.default_rng([tcfg.seed, _TRAIN_STREAM])
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    n = len(patches)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for step, lo in enumerate(range(0, n, tcfg.batch_size)):
            batch = patches.batch(order[lo:lo + tcfg.batch_size])
            masks = dropout_masks(mcfg, len(batch), rng)
            try:
                loss, grads, running = backward(params, mcfg, batch, w, True, masks,
                                                tcfg.center_only)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {step}")
            params, state = adam_step(state, params, grads, tcfg.lr, tcfg.beta1, tcfg.beta2,
                                      tcfg.eps_adam)
            params = replace(params, **running)
            total += loss * len(batch)
        history.epoch_loss.append(total / n)
        if callback is not None:
            callback(epoch, history.epoch_loss[-1])
    history.seconds = time.perf_counter() - start
    return params, history


def infer_abundances(params: ModelParams, cfg: ModelConfig, cube: HyperCube,
                     rows_per_chunk: int = 32) -> np.ndarray:
    """Eval-mode abundances for every pixel, K x H x W.

    Each pixel's value is the centre column of the encoder output on its
    zero-padded p x p patch. In eval mode the centre output depends only on
    the 3 x 3 neighbourhood, so the encoder runs once over the zero-padded
    image (in row strips) instead of once per patch. For p = 1 the
    neighbourhood is the pixel alone.
    """
    if cube.bands != cfg.bands:
        raise DimensionError(f"cube has {cube.bands} bands, model expects {cfg.bands}")
    if cube.height < cfg.patch_size or cube.width < cfg.patch_size:
        raise DimensionError("cube is smaller than one patch")
    H, W = cube.height, cube.width
    if cfg.patch_size == 1:
        a, _, _ = encoder_forward(params, cfg, cube.flat()[:, None, None, :])
        return np.ascontiguousarray(a.reshape(H, W, -1).transpose(2, 0, 1))
    out = np.empty((H, W, cfg.n_endmembers))
    padded = np.pad(cube.data, ((1, 1), (0, 0), (0, 0)))
    for top in range(0, H, rows_per_chunk):
        bottom = min(top + rows_per_chunk, H)
        strip = padded[top:bottom + 2][None]
        a, _, _ = encoder_forward(params, cfg, strip)
        out[top:bottom] = a[0, 1:-1]
    return np.ascontiguousarray(out.transpose(2, 0, 1))
