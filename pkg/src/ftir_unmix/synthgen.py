"""Synthetic absorbance scenes with known endmembers and abundances.

Randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``).
Each stage draws from its own stream keyed by ``(seed, stage)``, so a scene
is fully determined by its :class:`SynthSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cube_io import HyperCube, export_endmembers_csv, read_cube, read_endmembers_csv, write_cube
from .errors import ConfigError, DimensionError, GenerationError
from .losses import sad

_ENDMEMBER_STREAM, _ABUNDANCE_STREAM, _NOISE_STREAM, _ARTIFACT_STREAM = range(4)
MIN_SEPARATION = 0.3
MAX_RETRIES = 100


@dataclass(frozen=True)
class SynthSpec:
    height: int = 32
    width: int = 32
    bands: int = 100
    n_endmembers: int = 3
    peaks_per_endmember: int = 4
    peak_width: tuple[float, float] = (7.5, 7.5)
    smoothing_radius: int = 0
    concentration: float = 0.1
    snr_db: float | None = 30.0
    seed: int = 0
    wavenumber_range: tuple[float, float] | None = (4000.0, 650.0)

    def validate(self) -> "SynthSpec":
        if self.n_endmembers < 1:
            raise ConfigError("n_endmembers must be >= 1")
        if self.bands < 3:
            raise ConfigError("bands must be >= 3")
        if self.height < 1 or self.width < 1:
            raise ConfigError("height and width must be >= 1")
        if self.peaks_per_endmember < 1:
            raise ConfigError("peaks_per_endmember must be >= 1")
        lo, hi = self.peak_width
        if lo < 1 or hi < lo:
            raise ConfigError("peak widths must be >= 1 band and ordered (lo, hi)")
        if self.smoothing_radius < 0:
            raise ConfigError("smoothing_radius must be >= 0")
        if not self.concentration > 0:
            raise ConfigError("concentration must be > 0")
        return self

    def axis(self) -> np.ndarray | None:
        if self.wavenumber_range is None:
            return None
        return np.linspace(*self.wavenumber_range, self.bands)


@dataclass(frozen=True)
class ArtifactSpec:
    """Acquisition artifacts to inject.

    ``spike_bands`` holds ``(band, amplitude)`` pairs, ``flat_bands`` plain
    band indices and ``common_mode`` an optional ``(start, stop, amplitude)``
    half-open band range.
    """

    spike_bands: tuple[tuple[int, float], ...] = ()
    flat_bands: tuple[int, ...] = ()
    common_mode: tuple[int, int, float] | None = None

    def bands_by_kind(self) -> list[tuple[int, str]]:
        out = [(int(b), "spike") for b, _ in self.spike_bands]
        out += [(int(b), "flat") for b in self.flat_bands]
        if self.common_mode is not None:
            start, stop, _ = self.common_mode
            out += [(b, "common_mode") for b in range(int(start), int(stop))]
        return out

    def validate(self, n_bands: int) -> "ArtifactSpec":
        touched = self.bands_by_kind()
        for b, kind in touched:
            if not 0 <= b < n_bands:
                raise ConfigError(f"{kind} band {b} outside [0, {n_bands})")
        if self.common_mode is not None and self.common_mode[1] <= self.common_mode[0]:
            raise ConfigError("common-mode range is empty")
        bands = [b for b, _ in touched]
        if len(set(bands)) != len(bands):
            raise ConfigError("artifact band ranges overlap")
        return self


@dataclass
class GroundTruth:
    endmembers: np.ndarray  # B x K
    abundances: np.ndarray  # K x H x W
    artifact_log: list[tuple[int, str]] = field(default_factory=list)


def _stream(seed, stage):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stage])


def min_pairwise_sad(E: np.ndarray) -> float:
    k = E.shape[1]
    if k < 2:
        return np.inf
    return min(float(sad(E[:, i], E[:, j])) for i in range(k) for j in range(i + 1, k))


def gen_endmembers(spec: SynthSpec) -> np.ndarray:
    """Draw K endmember spectra as periodic combs of Gaussian peaks.

    Endmember ``j`` carries ``peaks_per_endmember`` peaks per band range,
    one every ``bands / peaks_per_endmember`` bands, and the K combs are
    interleaved at phase offsets of 1/K period (slot order and global phase
    are random). The combs extend past both ends of the band axis so the
    edges look like the interior. This keeps spatial contrast and
    neighbour correlation even across bands, so clean bands produce
    unremarkable band-quality diagnostics.

    Columns are nonnegative and scaled to a maximum of 1. Draws are
    repeated until every pair of columns is at least 0.3 rad apart.
    """
    spec.validate()
    rng = _stream(spec.seed, _ENDMEMBER_STREAM)
    k, n = spec.n_endmembers, spec.bands
    grid = np.arange(n, dtype=np.float64)
    period = n / spec.peaks_per_endmember
    lo, hi = spec.peak_width
    repeats = np.arange(-3, spec.peaks_per_endmember + 3)
    for _ in range(MAX_RETRIES):
        phase = rng.uniform(0.0, period)
        slots = rng.permutation(k)
        E = np.empty((n, k))
        for j in range(k):
            centres = phase + slots[j] * period / k + period * repeats
            width = rng.uniform(lo, hi)
            column = 0.05 + np.exp(-0.5 * ((grid[:, None] - centres) / width) ** 2).sum(axis=1)
            E[:, j] = column / column.max()
        if min_pairwise_sad(E) >= MIN_SEPARATION:
            return E
    raise GenerationError(
        f"could not separate {k} endmembers by {MIN_SEPARATION} rad "
        f"in {MAX_RETRIES} draws over {n} bands; use fewer peaks or narrower ones"
    )


def gen_abundances(spec: SynthSpec) -> np.ndarray:
    """Symmetric Dirichlet draws per pixel, box-smoothed, returned as K x H x W."""
    spec.validate()
    rng = _stream(spec.seed, _ABUNDANCE_STREAM)
    k = spec.n_endmembers
    A = rng.dirichlet(np.full(k, spec.concentration), size=(spec.height, spec.width))
    if spec.smoothing_radius > 0:
        size = (2 * spec.smoothing_radius + 1, 2 * spec.smoothing_radius + 1, 1)
        A = ndimage.uniform_filter(A, size=size, mode="constant")
    A = np.maximum(A, 0.0)
    A /= A.sum(axis=-1, keepdims=True)
    return np.ascontiguousarray(A.transpose(2, 0, 1))


def mix(E: np.ndarray, A: np.ndarray, snr_db: float | None = None, seed: int = 0,
        wavenumbers=None) -> HyperCube:
    """Linear mixing ``x(h, w) = E @ a(h, w) + noise``.

    Noise is i.i.d. Gaussian with power set so that
    ``10 log10(mean(signal^2) / noise_var) == snr_db``; ``snr_db=None``
    gives the noiseless cube.
    """
    E = np.asarray(E, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if E.ndim != 2 or A.ndim != 3 or E.shape[1] != A.shape[0]:
        raise DimensionError(f"cannot mix E{E.shape} with A{A.shape}")
    X = np.einsum("bk,khw->hwb", E, A)
    if snr_db is not None:
        rng = _stream(seed, _NOISE_STREAM)
        power = np.mean(X * X)
        sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
        X = X + sigma * rng.standard_normal(X.shape)
    return HyperCube(X, wavenumbers)


def inject_artifacts(cube: HyperCube, art: ArtifactSpec, seed: int = 0):
    """Corrupt selected bands of ``cube``.

    * spike bands: each pixel gets an independent additive spike
      ``amplitude * Exp(1)``, which breaks correlation with adjacent bands;
    * flat bands: replaced by their spatial mean, so they carry no variance;
    * common-mode block: the same alternating comb ``+-amplitude`` is added
      at every pixel (spatially flat, spectrally rough, like ambient CO2
      rotational lines).

    Returns the corrupted cube and the list of ``(band, kind)`` touched.
    """
    art.validate(cube.bands)
    log = art.bands_by_kind()
    if not log:
        return cube.with_data(cube.data.copy()), []
    rng = _stream(seed, _ARTIFACT_STREAM)
    X = cube.data.copy()
    for b, amp in art.spike_bands:
        X[:, :, b] += amp * rng.exponential(1.0, size=X.shape[:2])
    for b in art.flat_bands:
        X[:, :, b] = X[:, :, b].mean()
    if art.common_mode is not None:
        start, stop, amp = art.common_mode
        comb = amp * (-1.0) ** np.arange(stop - start)
        X[:, :, start:stop] += comb
    return cube.with_data(X), log


def default_artifacts(spec: SynthSpec, spike_amplitude: float = 5.0,
                      common_mode_amplitude: float = 0.1, block: int = 8) -> ArtifactSpec:
    """One spike band, one flat band and an 8-band comb near 2350 cm^-1.

    Without a wavenumber axis the comb is centred on the middle band.
    """
    n = spec.bands
    axis = spec.axis()
    centre = int(np.argmin(np.abs(axis - 2350.0))) if axis is not None else n // 2
    start = int(np.clip(centre - block // 2, 0, n - block))
    spike, flat = n // 5, (3 * n) // 4
    return ArtifactSpec(
        spike_bands=((spike, spike_amplitude),),
        flat_bands=(flat,),
        common_mode=(start, start + block, common_mode_amplitude),
    )


def make_scene(spec: SynthSpec, artifacts: ArtifactSpec | None = None):
    """Generate ``(cube, truth)`` for ``spec``, optionally with artifacts."""
    E = gen_endmembers(spec)
    A = gen_abundances(spec)
    cube = mix(E, A, spec.snr_db, spec.seed, spec.axis())
    log: list[tuple[int, str]] = []
    if artifacts is not None:
        cube, log = inject_artifacts(cube, artifacts, spec.seed)
    return cube, GroundTruth(E, A, log)


def write_truth(truth: GroundTruth, directory, wavenumbers=None) -> dict[str, Path]:
    """Write the ground-truth bundle: endmember CSV, abundance cube, artifact log."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "endmembers": directory / "endmembers.csv",
        "abundances": directory / "abundances.ftc",
        "artifacts": directory / "artifacts.txt",
    }
    export_endmembers_csv(truth.endmembers, paths["endmembers"], wavenumbers)
    write_cube(HyperCube(truth.abundances.transpose(1, 2, 0)), paths["abundances"])
    lines = [f"{b}\t{kind}" for b, kind in truth.artifact_log]
    paths["artifacts"].write_text("".join(line + "\n" for line in lines))
    return paths


def read_truth(directory) -> GroundTruth:
    directory = Path(directory)
    E, _ = read_endmembers_csv(directory / "endmembers.csv")
    A = read_cube(directory / "abundances.ftc").data.transpose(2, 0, 1)
    log = []
    artifacts = directory / "artifacts.txt"
    if artifacts.exists():
        for line in artifacts.read_text().splitlines():
            if line.strip():
                b, kind = line.split("\t")
                log.append((int(b), kind))
    return GroundTruth(E, np.ascontiguousarray(A), log)
