import numpy as np
import pytest

from ftir_unmix.bandweights import estimate_band_weights
from ftir_unmix.model import ModelConfig
from ftir_unmix.synthgen import SynthSpec, default_artifacts, make_scene
from ftir_unmix.training import TrainConfig, train

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

RECOVERY_TRAIN = dict(num_patches=2000, epochs=200, lr=0.005, patch_size=5)


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_spec():
    return SynthSpec()


@pytest.fixture(scope="session")
def contaminated_scene(default_spec):
    """Default scene with one spike band, one flat band and an 8-band comb."""
    return make_scene(default_spec, default_artifacts(default_spec))


@pytest.fixture(scope="session")
def contaminated_weights(contaminated_scene):
    return estimate_band_weights(contaminated_scene[0])


@pytest.fixture(scope="session")
def noiseless_scene():
    return make_scene(SynthSpec(snr_db=None))


@pytest.fixture(scope="session")
def recovery_run(noiseless_scene):
    """SAD training on the noiseless K=3 scene: 2000 patches, 200 epochs."""
    cube, truth = noiseless_scene
    mcfg = ModelConfig(cube.bands, 3, patch_size=5)
    tcfg = TrainConfig(loss="sad", seed=0, **RECOVERY_TRAIN)
    params, history = train(cube, mcfg, tcfg)
    return params, mcfg, history


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
