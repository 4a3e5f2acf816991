import math

import numpy as np
import pytest

from ftir_unmix.cube_io import HyperCube
from ftir_unmix.errors import ConfigError, DimensionError, NumericalError
from ftir_unmix.evaluation import match_endmembers
from ftir_unmix.losses import wsad
from ftir_unmix.model import ModelConfig, dropout_masks, encode, endmembers, forward, init_params
from ftir_unmix.training import (
    LEARNABLE,
    AdamState,
    PatchBatch,
    TrainConfig,
    adam_step,
    backward,
    batch_loss,
    finite_diff_grad,
    freeze_batch_stats,
    gradcheck,
    infer_abundances,
    relative_error,
    sample_patches,
    train,
)

GRAD_CFG = ModelConfig(bands=12, n_endmembers=3, patch_size=3, hidden=4)


def _setup(cfg, rng, n=4):
    p = cfg.patch_size
    X = rng.uniform(0.05, 1.0, (n, cfg.bands, p, p))
    params = init_params(cfg, HyperCube(rng.uniform(0.05, 1.0, (4, 4, cfg.bands))), seed=0)
    params.dec_u = rng.uniform(-1, 1, params.dec_u.shape)
    return X, params


def _tiny_cube(seed=0):
    rng = np.random.default_rng(seed)
    E = rng.random((8, 2)) + 0.1
    A = rng.dirichlet([0.5, 0.5], size=(10, 10))
    return HyperCube(A @ E.T)


# -- batch loss ---------------------------------------------------------------------


def test_single_pixel_loss_is_its_wsad(rng):
    cfg = ModelConfig(bands=5, n_endmembers=2, patch_size=1, hidden=3)
    X, params = _setup(cfg, rng, n=1)
    w = rng.random(5)
    recon = forward(params, cfg, X).recon
    want = wsad(X[0, :, 0, 0], recon[0, 0, 0], w)
    assert batch_loss(params, cfg, X, w, batch_stats=False) == pytest.approx(want, abs=1e-15)


def test_loss_averages_all_patch_pixels(rng):
    X, params = _setup(GRAD_CFG, rng)
    recon = forward(params, GRAD_CFG, X).recon
    per_pixel = wsad(X.transpose(0, 2, 3, 1), recon, np.ones(12))
    assert batch_loss(params, GRAD_CFG, X, batch_stats=False) == pytest.approx(per_pixel.mean())
    centre = batch_loss(params, GRAD_CFG, X, batch_stats=False, center_only=True)
    assert centre == pytest.approx(per_pixel[:, 1, 1].mean())


def test_duplicating_batch_leaves_eval_loss_unchanged(rng):
    X, params = _setup(GRAD_CFG, rng)
    w = rng.random(12)
    once = batch_loss(params, GRAD_CFG, X, w, batch_stats=False)
    twice = batch_loss(params, GRAD_CFG, np.concatenate([X, X]), w, batch_stats=False)
    assert twice == pytest.approx(once, rel=1e-14)


def test_loss_within_angle_range(rng):
    for scale in (1e-6, 1.0, 1e6):
        X, params = _setup(GRAD_CFG, rng)
        X = scale * rng.normal(size=X.shape)
        masks = dropout_masks(GRAD_CFG, len(X), rng)
        v = batch_loss(params, GRAD_CFG, X, rng.random(12), True, masks)
        assert 0 <= v <= math.pi


# -- gradients ------------------------------------------------------------------------


@pytest.mark.parametrize("loss", ["sad", "wsad"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradcheck(loss, seed):
    result = gradcheck(GRAD_CFG, batch_size=2, loss=loss, h=1e-5, seed=seed)
    assert set(result.errors) == set(LEARNABLE)
    assert result.max_error < 1e-4, result.errors


def test_gradcheck_in_train_mode(rng):
    # batch statistics and dropout both active; fixed masks keep the loss a pure function
    X, params = _setup(GRAD_CFG, rng, n=3)
    w = rng.uniform(0.05, 1, 12)
    masks = dropout_masks(GRAD_CFG, 3, rng)
    _, analytic, _ = backward(params, GRAD_CFG, X, w, batch_stats=True, masks=masks)
    numeric = finite_diff_grad(params, GRAD_CFG, X, w, 1e-5, batch_stats=True, masks=masks)
    for name in LEARNABLE:
        scale = max(1.0, np.abs(numeric[name]).max())
        assert np.max(np.abs(analytic[name] - numeric[name])) <= 1e-6 * scale, name


def test_zero_weight_bands_get_no_decoder_gradient(rng):
    cfg = ModelConfig(bands=6, n_endmembers=2, patch_size=1, hidden=3)
    X, params = _setup(cfg, rng)
    w = np.array([1.0, 0.0, 0.5, 0.0, 1.0, 0.3])
    _, grads, _ = backward(params, cfg, X, w, batch_stats=True)
    assert np.all(grads["dec_u"][[1, 3]] == 0)
    assert np.all(grads["dec_u"][[0, 2, 4, 5]] != 0)


def test_running_stats_get_no_gradient(rng):
    X, params = _setup(GRAD_CFG, rng)
    _, grads, running = backward(params, GRAD_CFG, X)
    assert set(grads) == set(LEARNABLE)
    assert set(running) == {"bn1_mean", "bn1_var", "bn2_mean", "bn2_var"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_is_reported(rng):
    X, params = _setup(GRAD_CFG, rng)
    params.dec_u[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="non-finite gradient in"):
        backward(params, GRAD_CFG, X)


def test_finite_differences_on_cubic(rng):
    X, params = _setup(GRAD_CFG, rng)

    def cubic(q):
        return np.sum(q.conv2_b ** 3) + 0.5 * np.sum(q.bn1_beta ** 2)

    for h, tol in ((1e-2, 2e-4), (1e-3, 2e-6)):
        g = finite_diff_grad(params, GRAD_CFG, X, h=h, loss_fn=cubic)
        # central differences of x^3 are off by exactly h^2
        assert np.allclose(g["conv2_b"], 3 * params.conv2_b ** 2 + h * h, atol=tol * 1e-3)
        assert np.allclose(g["bn1_beta"], params.bn1_beta, atol=1e-9)
        assert np.all(g["dec_u"] == 0)


def test_finite_difference_error_is_second_order(rng):
    X, params = _setup(GRAD_CFG, rng, n=2)
    params = freeze_batch_stats(params, GRAD_CFG, X)
    _, analytic, _ = backward(params, GRAD_CFG, X, batch_stats=False)

    def err(h):
        fd = finite_diff_grad(params, GRAD_CFG, X, h=h)
        return max(np.max(np.abs(fd[k] - analytic[k])) for k in ("conv2_w", "bn2_gamma", "dec_u"))

    ratio = err(2e-3) / err(1e-3)
    assert 3.0 < ratio < 5.0


def test_relative_error_floor():
    assert relative_error([0.0], [5e-9]) == pytest.approx(0.5)
    assert relative_error([2.0], [1.0]) == pytest.approx(0.5)


# -- Adam -------------------------------------------------------------------------------


def test_adam_zero_gradient(rng):
    params = {"x": rng.normal(size=3)}
    state = AdamState({"x": np.ones(3)}, {"x": np.ones(3)}, 4)
    new, state2 = adam_step(state, params, {"x": np.zeros(3)}, 0.01)
    assert np.all(np.abs(state2.m["x"]) < np.abs(state.m["x"]))
    assert np.all(state2.v["x"] < state.v["x"]) and state2.t == 5
    fresh, _ = adam_step(AdamState({"x": np.zeros(3)}, {"x": np.zeros(3)}), params,
                         {"x": np.zeros(3)}, 0.01)
    assert np.array_equal(fresh["x"], params["x"])


def test_adam_first_step_is_signed_lr():
    g = np.array([1e-4, -3.0, 250.0, -1e3])
    params = {"x": np.zeros(4)}
    new, state = adam_step(AdamState({"x": np.zeros(4)}, {"x": np.zeros(4)}), params, {"x": g}, 0.005)
    assert np.allclose(new["x"], -0.005 * np.sign(g), rtol=1e-3)
    assert state.t == 1 and np.all(state.v["x"] >= 0)


def test_adam_is_pure(rng):
    X, params = _setup(GRAD_CFG, rng)
    before = params.dec_u.copy()
    _, grads, _ = backward(params, GRAD_CFG, X)
    new, _ = adam_step(AdamState.zeros_like(params), params, grads, 0.01)
    assert np.array_equal(params.dec_u, before) and not np.array_equal(new.dec_u, before)


def test_adam_zero_lr_leaves_loss_unchanged(rng):
    X, params = _setup(GRAD_CFG, rng)
    _, grads, _ = backward(params, GRAD_CFG, X)
    new, _ = adam_step(AdamState.zeros_like(params), params, grads, 0.0)
    assert batch_loss(new, GRAD_CFG, X, batch_stats=False) == batch_loss(params, GRAD_CFG, X, batch_stats=False)


def test_adam_converges_on_quadratic():
    target = np.array([1.0, -2.0])
    scale = np.array([1.0, 10.0])
    params = {"x": np.zeros(2)}
    state = AdamState({"x": np.zeros(2)}, {"x": np.zeros(2)})
    for _ in range(5000):
        params, state = adam_step(state, params, {"x": 2 * scale * (params["x"] - target)}, 0.005)
    assert np.max(np.abs(params["x"] - target)) <= 1e-6


# -- sampling ---------------------------------------------------------------------------


def test_patch_sized_cube_gives_identical_patches(rng):
    cube = HyperCube(rng.random((5, 5, 4)))
    batch = sample_patches(cube, 20, 5, seed=1).batch(np.arange(20))
    assert np.all(batch.patches == cube.data.transpose(2, 0, 1)[None])
    assert np.all(batch.centers == 2)


def test_sampling_deterministic_and_interior(rng):
    cube = HyperCube(rng.random((12, 9, 3)))
    a, b = sample_patches(cube, 300, 5, seed=4), sample_patches(cube, 300, 5, seed=4)
    assert np.array_equal(a.centers, b.centers)
    assert not np.array_equal(a.centers, sample_patches(cube, 300, 5, seed=5).centers)
    assert a.centers[:, 0].min() >= 2 and a.centers[:, 0].max() <= 9
    assert a.centers[:, 1].min() >= 2 and a.centers[:, 1].max() <= 6
    batch = a.batch(np.arange(3))
    r, c = batch.centers[1]
    assert np.array_equal(batch.patches[1], cube.data[r - 2:r + 3, c - 2:c + 3].transpose(2, 0, 1))


def test_sampling_covers_every_centre():
    cube = HyperCube(np.zeros((32, 32, 2)))
    centers = sample_patches(cube, 100_000, 5, seed=0).centers
    assert len({(int(r), int(c)) for r, c in centers}) == 28 * 28


def test_sampling_rejects_small_cube():
    with pytest.raises(DimensionError):
        sample_patches(HyperCube(np.zeros((4, 9, 2))), 5, 5)


# -- training loop ----------------------------------------------------------------------


def _tiny_configs(**kw):
    mcfg = ModelConfig(bands=8, n_endmembers=2, patch_size=3, hidden=4)
    tcfg = TrainConfig(num_patches=96, patch_size=3, batch_size=32, epochs=3, seed=2,
                       deterministic=True, **kw)
    return mcfg, tcfg


def test_deterministic_training_is_bit_identical():
    cube = _tiny_cube()
    mcfg, tcfg = _tiny_configs(loss="sad")
    a, ha = train(cube, mcfg, tcfg)
    b, hb = train(cube, mcfg, tcfg)
    for name in a.names():
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert ha.epoch_loss == hb.epoch_loss and len(ha.epoch_loss) == 3
    assert all(0 <= v <= math.pi for v in ha.epoch_loss)


def test_sad_run_equals_wsad_run_with_unit_weights():
    cube = _tiny_cube()
    mcfg, tcfg = _tiny_configs(loss="sad")
    a, _ = train(cube, mcfg, tcfg)
    b, _ = train(cube, mcfg, TrainConfig(**(vars(tcfg) | {"loss": "wsad"})), w=np.ones(8))
    for name in a.names():
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_training_config_errors():
    cube = _tiny_cube()
    mcfg, tcfg = _tiny_configs(loss="wsad")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(loss="mse").validate()
    with pytest.raises(ConfigError):
        train(cube, mcfg, tcfg)  # WSAD without weights
    with pytest.raises(ConfigError):
        train(cube, mcfg, TrainConfig(patch_size=5, loss="sad"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_failure_names_epoch_and_batch():
    cube = _tiny_cube()
    mcfg, tcfg = _tiny_configs(loss="sad")
    params = init_params(mcfg, cube, 0)
    params.dec_u[:] = np.nan
    with pytest.raises(NumericalError, match="epoch 0, batch 0"):
        train(cube, mcfg, tcfg, params=params)


def test_callback_sees_every_epoch():
    seen = []
    mcfg, tcfg = _tiny_configs(loss="sad")
    train(_tiny_cube(), mcfg, tcfg, callback=lambda e, v: seen.append(e))
    assert seen == [0, 1, 2]


@pytest.mark.slow
def test_training_reduces_loss_by_ninety_percent(recovery_run):
    _, _, history = recovery_run
    reduction = 1 - history.final_loss / history.epoch_loss[0]
    assert reduction >= 0.9, f"epoch-1 loss {history.epoch_loss[0]:.4f}, final {history.final_loss:.4f}"


@pytest.mark.slow
def test_near_pure_pixels_recovered(recovery_run, noiseless_scene):
    params, mcfg, _ = recovery_run
    cube, truth = noiseless_scene
    A = infer_abundances(params, mcfg, cube)
    match = match_endmembers(endmembers(params, mcfg), truth.endmembers)
    true_of_est = np.asarray(match.permutation)
    pure = truth.abundances.max(axis=0) >= 0.99
    assert pure.sum() >= 50
    dominant = truth.abundances.argmax(axis=0)
    est_index = np.argsort(true_of_est)[dominant]  # estimated column matched to each true one
    value = np.take_along_axis(A, est_index[None], axis=0)[0]
    assert np.mean(value[pure] >= 0.8) >= 0.9


# -- inference --------------------------------------------------------------------------


@pytest.mark.parametrize("p", [1, 3, 5])
def test_infer_matches_per_pixel_encode(rng, p):
    cfg = ModelConfig(bands=4, n_endmembers=3, patch_size=p, hidden=5)
    cube = HyperCube(rng.random((7, 6, 4)))
    params = init_params(cfg, cube, 0)
    for name in ("bn1_mean", "bn2_mean", "bn1_beta", "conv2_b"):
        getattr(params, name)[:] = rng.normal(size=getattr(params, name).shape)
    r = p // 2
    padded = np.pad(cube.data, ((r, r), (r, r), (0, 0)))
    want = np.empty((3, 7, 6))
    for i in range(7):
        for j in range(6):
            patch = padded[i:i + p, j:j + p].transpose(2, 0, 1)
            want[:, i, j] = encode(params, cfg, patch)[:, r, r]
    got = infer_abundances(params, cfg, cube, rows_per_chunk=3)
    assert np.allclose(got, want, atol=1e-12)
    assert np.max(np.abs(got.sum(axis=0) - 1)) <= 1e-6
    assert got.tobytes() == infer_abundances(params, cfg, cube, rows_per_chunk=3).tobytes()


def test_infer_dimension_errors(rng):
    cfg = ModelConfig(bands=4, n_endmembers=3, patch_size=5, hidden=5)
    params = init_params(cfg, HyperCube(rng.random((6, 6, 4))), 0)
    with pytest.raises(DimensionError):
        infer_abundances(params, cfg, HyperCube(rng.random((6, 6, 5))))
    with pytest.raises(DimensionError):
        infer_abundances(params, cfg, HyperCube(rng.random((3, 6, 4))))


def test_patch_batch_len(rng):
    assert len(PatchBatch(np.zeros((3, 2, 1, 1)), np.zeros((3, 2), int))) == 3
