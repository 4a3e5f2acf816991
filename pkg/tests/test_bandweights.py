import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftir_unmix.bandweights import (
    BandWeights,
    WeightConfig,
    estimate_band_weights,
    map_weights,
    neighbour_corr_deficit,
    outlier_score,
    read_weights_csv,
    robust_standardize,
    robust_z,
    spatial_flatness,
    spectral_roughness,
    write_weights_csv,
)
from ftir_unmix.cube_io import HyperCube
from ftir_unmix.errors import DataError, DimensionError
from ftir_unmix.evaluation import clean_band_mask
from ftir_unmix.synthgen import SynthSpec, make_scene

EPS = 1e-12


# -- plain-python oracles ---------------------------------------------------------


def oracle_standardize(columns):
    out = []
    for col in columns:
        med = statistics.median(col)
        mad = statistics.median(abs(v - med) for v in col)
        z = [(v - med) / (mad + EPS) for v in col]
        mean = sum(z) / len(z)
        z = [v - mean for v in z]
        std = math.sqrt(sum(v * v for v in z) / len(z))
        out.append([0.0] * len(z) if std <= EPS else [v / std for v in z])
    return out


def oracle_corr_deficit(zcols):
    n = len(zcols[0])
    rho = [sum(a * b for a, b in zip(zcols[i], zcols[i + 1])) / n for i in range(len(zcols) - 1)]
    c = [rho[0]] + [min(rho[i - 1], rho[i]) for i in range(1, len(zcols) - 1)] + [rho[-1]]
    return [1 - v for v in c]


def test_standardize_matches_oracle(rng):
    Y = rng.gamma(2.0, size=(40, 6))
    Y[:, 3] = 7.0
    got = robust_standardize(Y)
    want = np.array(oracle_standardize(Y.T.tolist())).T
    assert np.allclose(got, want, atol=1e-12)


def test_corr_deficit_matches_oracle(rng):
    Z = robust_standardize(rng.normal(size=(30, 7)).cumsum(axis=1))
    want = oracle_corr_deficit(Z.T.tolist())
    assert np.allclose(neighbour_corr_deficit(Z), want, atol=1e-12)


def test_constant_band_standardizes_to_zero(rng):
    Y = rng.random((20, 4))
    Y[:, 2] = 3.3
    assert np.all(robust_standardize(Y)[:, 2] == 0)


def test_isolated_outlier_survives_standardization():
    Z = robust_standardize(np.array([[0.0], [0.0], [0.0], [1000.0]]))
    # median 0 and MAD 0 give a huge raw score; after unit variance it is sqrt(3)
    assert abs(Z[3, 0]) > 1.5 and abs(Z[3, 0]) > 2 * abs(Z[0, 0])
    assert Z[3, 0] == pytest.approx(math.sqrt(3.0))


def test_standardized_columns_have_zero_mean_unit_variance(rng):
    Z = robust_standardize(rng.lognormal(size=(500, 9)))
    assert np.max(np.abs(Z.mean(axis=0))) < 1e-12
    assert np.max(np.abs(Z.var(axis=0) - 1)) < 1e-9


def test_standardize_needs_two_pixels():
    with pytest.raises(DataError):
        robust_standardize(np.ones((1, 5)))


def test_corr_deficit_identical_and_negated(rng):
    base = rng.normal(size=(200, 1))
    Z = robust_standardize(np.repeat(base, 5, axis=1))
    assert np.allclose(neighbour_corr_deficit(Z), 0, atol=1e-12)
    Y = np.repeat(base, 5, axis=1)
    Y[:, 2] *= -1
    d = neighbour_corr_deficit(robust_standardize(Y))
    assert d[2] == pytest.approx(2.0)


def test_corr_deficit_of_noise_band():
    rng = np.random.default_rng(0)
    smooth = rng.normal(size=(10_000, 1)) + 0.01 * rng.normal(size=(10_000, 6))
    smooth[:, 3] = rng.normal(size=10_000)
    d = neighbour_corr_deficit(robust_standardize(smooth))
    assert abs(d[3] - 1) < 0.05


def test_corr_deficit_needs_two_bands():
    with pytest.raises(DimensionError):
        neighbour_corr_deficit(np.ones((4, 1)))


def test_roughness_linear_spike_and_gaussian():
    b = np.arange(40.0)
    assert np.allclose(spectral_roughness(np.tile(2 + 0.5 * b, (3, 1))), 0, atol=1e-12)

    spike = np.zeros(40)
    spike[17] = 0.7
    d = spectral_roughness(np.tile(spike, (3, 1)))
    assert d[17] == pytest.approx(1.4) and d[16] == pytest.approx(0.7) and d[18] == pytest.approx(0.7)
    assert d[0] == d[1] and d[-1] == d[-2]

    # |f''| of a unit Gaussian peaks at 1/sigma^2 = 1/64 ~ 0.0156 for sigma = 8 bands
    g = np.exp(-0.5 * ((np.arange(100.0) - 50) / 8) ** 2)
    assert spectral_roughness(np.tile(g, (2, 1))).max() < 0.03


def test_roughness_needs_three_bands():
    with pytest.raises(DimensionError):
        spectral_roughness(np.ones((4, 2)))


def test_flatness_values(rng):
    Y = np.column_stack([np.full(50, 2.0), rng.normal(size=50)])
    d = spatial_flatness(Y)
    assert d[0] == pytest.approx(-math.log(1e-12))
    assert d[0] == pytest.approx(27.631021115928547)
    Y[:, 1] = (Y[:, 1] - Y[:, 1].mean()) / Y[:, 1].std()
    assert abs(spatial_flatness(Y)[1]) < 1e-9
    doubled = spatial_flatness(2 * Y)
    assert spatial_flatness(Y)[1] - doubled[1] == pytest.approx(math.log(4), abs=1e-9)


def test_robust_z_cases():
    assert np.all(robust_z(np.full(6, 4.2)) == 0)
    u = np.array([3.0, 1.0, 2.0, 9.0, 5.0])
    assert robust_z(u)[2] == 0 or robust_z(u)[0] == 0
    z = robust_z(np.array([0, 0, 0, 0, 10.0]))
    assert z[-1] == pytest.approx(10 / 1e-12) and np.all(z[:-1] == 0)


def test_robust_z_matches_oracle(rng):
    u = rng.standard_t(3, size=25)
    med = statistics.median(u.tolist())
    mad = statistics.median([abs(v - med) for v in u.tolist()])
    assert np.allclose(robust_z(u), [(v - med) / (mad + EPS) for v in u.tolist()], atol=1e-12)


def test_outlier_score_cases(rng):
    cfg = WeightConfig()
    assert np.all(outlier_score(np.ones(8), np.ones(8) * 2, np.ones(8) * 3, cfg) == 0)
    dc, dr, df = rng.random((3, 20))
    only_corr = outlier_score(dc, dr, df, WeightConfig(gamma_rough=0, gamma_flat=0))
    assert np.array_equal(only_corr, np.maximum(robust_z(dc), 0))
    with pytest.raises(DimensionError):
        outlier_score(np.ones(3), np.ones(4), np.ones(3), cfg)


def test_outlier_score_monotone_above_median(rng):
    # raising one entry that already sits above the median moves neither the median
    # nor the MAD down, so the score of that entry cannot fall
    for _ in range(50):
        d = [rng.random(21) for _ in range(3)]
        s0 = outlier_score(*d)
        which, b = rng.integers(3), int(np.argmax(d[0]))
        bumped = [x.copy() for x in d]
        bumped[which][b] = bumped[which].max() + rng.random()
        assert outlier_score(*bumped)[b] >= s0[b] - 1e-12


def test_map_weights_values():
    cfg = WeightConfig(tau=3.0, alpha=2.0, w_min=0.05)
    assert map_weights(np.array([3.0]), cfg)[0] == pytest.approx(0.05 + 0.95 / 2)
    assert map_weights(np.array([1e6]), cfg)[0] == pytest.approx(0.05)
    # 0.05 + 0.95 * sigmoid(6)
    assert map_weights(np.array([0.0]), cfg)[0] == pytest.approx(0.9976510080, abs=1e-9)
    assert np.all(map_weights(np.linspace(0, 50, 9), WeightConfig(w_min=1.0)) == 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_map_weights_bounded_and_decreasing(a, b):
    cfg = WeightConfig()
    w = map_weights(np.array([a, b]), cfg)
    assert np.all((w >= cfg.w_min) & (w <= 1))
    if a < b:
        assert w[0] >= w[1]


def test_map_weights_strictly_decreasing_in_the_transition():
    w = map_weights(np.linspace(0, 14, 200))
    assert np.all(np.diff(w) < 0)


def test_clean_scene_weights():
    cube, _ = make_scene(SynthSpec())
    bw = estimate_band_weights(cube)
    assert np.mean(bw.w >= 0.8) >= 0.95


def test_artifact_scene_weights(contaminated_scene, contaminated_weights):
    _, truth = contaminated_scene
    w = contaminated_weights.w
    assert max(w[b] for b, _ in truth.artifact_log) <= 0.2
    assert np.mean(w[clean_band_mask(w.size, truth.artifact_log)] >= 0.8) >= 0.95


def test_weights_invariant_to_pixel_order_and_offset(contaminated_scene, rng):
    cube, _ = contaminated_scene
    ref = estimate_band_weights(cube)
    perm = rng.permutation(cube.height * cube.width)
    shuffled = HyperCube(cube.flat()[perm].reshape(cube.shape))
    got = estimate_band_weights(shuffled)
    # reordering pixels only reorders floating-point sums
    assert np.allclose(got.w, ref.w, rtol=0, atol=1e-9)
    shifted = estimate_band_weights(HyperCube(cube.data + 0.5))
    assert np.allclose(shifted.diagnostics.d_corr, ref.diagnostics.d_corr, atol=1e-9)
    assert np.allclose(shifted.diagnostics.d_rough, ref.diagnostics.d_rough, atol=1e-12)


def test_pipeline_deterministic_and_bounded(contaminated_scene):
    cube, _ = contaminated_scene
    a, b = estimate_band_weights(cube), estimate_band_weights(cube)
    assert np.array_equal(a.w, b.w)
    cfg = a.config
    assert np.all((a.w >= cfg.w_min) & (a.w <= 1))
    assert np.all(a.diagnostics.s >= 0)
    assert isinstance(a, BandWeights) and len(a) == cube.bands


def test_weights_csv_round_trip(tmp_path, contaminated_scene, contaminated_weights):
    cube, _ = contaminated_scene
    write_weights_csv(contaminated_weights, tmp_path / "w.csv", cube.wavenumbers)
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[1] == "band,wavenumber,d_corr,d_rough,d_flat,s,w"
    back = read_weights_csv(tmp_path / "w.csv")
    assert np.array_equal(back.w, contaminated_weights.w)
    assert np.array_equal(back.diagnostics.s, contaminated_weights.diagnostics.s)
    assert back.config == contaminated_weights.config
