"""Scoring estimated endmembers, abundances and band weights against ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import DimensionError
from .losses import sad

DETECTION_THRESHOLD = 0.5


@dataclass(frozen=True)
class MatchResult:
    permutation: np.ndarray  # permutation[i] = true index matched to estimated column i
    sad: np.ndarray  # per estimated column, radians
    mean_sad: float

    def true_order(self) -> np.ndarray:
        """Estimated column index for each true endmember."""
        return np.argsort(self.permutation)


def _pairwise_sad(E_hat, E_true):
    E_hat = np.asarray(E_hat, dtype=np.float64)
    E_true = np.asarray(E_true, dtype=np.float64)
    if E_hat.ndim != 2 or E_hat.shape != E_true.shape:
        raise DimensionError(f"endmember matrices differ: {E_hat.shape} vs {E_true.shape}")
    return sad(E_hat.T[:, None, :], E_true.T[None, :, :])


def match_endmembers(E_hat, E_true) -> MatchResult:
    """Greedy matching: repeatedly pair the globally closest unmatched columns."""
    D = _pairwise_sad(E_hat, E_true)
    k = D.shape[0]
    perm = np.full(k, -1)
    work = D.copy()
    for _ in range(k):
        i, j = np.unravel_index(np.argmin(work), work.shape)
        perm[i] = j
        work[i, :] = np.inf
        work[:, j] = np.inf
    per = D[np.arange(k), perm]
    return MatchResult(perm, per, float(per.mean()))


def match_endmembers_exhaustive(E_hat, E_true) -> MatchResult:
    """Minimum-mean-SAD assignment by enumerating all K! permutations."""
    D = _pairwise_sad(E_hat, E_true)
    k = D.shape[0]
    idx = np.arange(k)
    best = min(permutations(range(k)), key=lambda p: D[idx, list(p)].sum())
    perm = np.array(best)
    per = D[idx, perm]
    return MatchResult(perm, per, float(per.mean()))


def abundance_rmse(A_hat, A_true, perm) -> float:
    """RMSE over all K*H*W entries after reordering ``A_hat`` to the true order.

    ``perm[i]`` is the true index of estimated channel ``i``, as in
    :class:`MatchResult`.
    """
    A_hat = np.asarray(A_hat, dtype=np.float64)
    A_true = np.asarray(A_true, dtype=np.float64)
    perm = np.asarray(perm)
    if A_hat.shape != A_true.shape or perm.shape != (A_hat.shape[0],):
        raise DimensionError(f"abundance shapes differ: {A_hat.shape} vs {A_true.shape}")
    reordered = np.empty_like(A_hat)
    reordered[perm] = A_hat
    return float(np.sqrt(np.mean((reordered - A_true) ** 2)))


def banded_sad(E_hat, E_true, perm, bands) -> float:
    """Mean matched SAD computed on a subset of bands only."""
    bands = np.asarray(sorted(set(int(b) for b in bands)))
    E_hat = np.asarray(E_hat, dtype=np.float64)
    E_true = np.asarray(E_true, dtype=np.float64)
    reordered = np.empty_like(E_hat)
    reordered[:, np.asarray(perm)] = E_hat
    return float(np.mean(sad(reordered[bands].T, E_true[bands].T)))


@dataclass(frozen=True)
class DetectionReport:
    true_positives: int
    false_positives: int
    false_negatives: int
    ignored: tuple[int, ...]

    @property
    def precision(self) -> float:
        flagged = self.true_positives + self.false_positives
        return 1.0 if flagged == 0 else self.true_positives / flagged

    @property
    def recall(self) -> float:
        actual = self.true_positives + self.false_negatives
        return 1.0 if actual == 0 else self.true_positives / actual


def weight_detection_report(w, artifact_log, threshold: float = DETECTION_THRESHOLD) -> DetectionReport:
    """Precision and recall of ``w < threshold`` as a contaminated-band detector.

    The immediate neighbours of each contaminated band are ignored when
    counting false positives: the curvature diagnostic spills over onto them.
    Undefined precision or recall (nothing flagged, nothing contaminated)
    is reported as 1.
    """
    w = np.asarray(w, dtype=np.float64)
    contaminated = {int(b) for b, _ in artifact_log}
    for b in contaminated:
        if not 0 <= b < w.size:
            raise DimensionError(f"artifact band {b} outside [0, {w.size})")
    spill = {b + d for b in contaminated for d in (-1, 1)} - contaminated
    spill = {b for b in spill if 0 <= b < w.size}
    flagged = set(np.flatnonzero(w < threshold).tolist())
    tp = len(flagged & contaminated)
    fp = len(flagged - contaminated - spill)
    fn = len(contaminated - flagged)
    return DetectionReport(tp, fp, fn, tuple(sorted(spill)))


def clean_band_mask(n_bands: int, artifact_log) -> np.ndarray:
    """True for bands that are neither contaminated nor next to a contaminated band."""
    mask = np.ones(n_bands, dtype=bool)
    for b, _ in artifact_log:
        mask[max(b - 1, 0):b + 2] = False
    return mask
