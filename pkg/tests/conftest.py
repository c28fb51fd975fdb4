import warnings

import numpy as np
import pytest

from nsmae.config import make_config
from nsmae.data import Geometry, make_split


@pytest.fixture(autouse=True)
def _quiet_empty_support():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def small_cfg():
    # 16x32 frames keep per-test cost low while exercising every module
    return make_config({"camera.height": 16, "camera.width": 32, "scene.n_train": 4, "scene.n_val": 2, "scene.n_test": 2, "train.epochs": 2})


@pytest.fixture(scope="session")
def small_geom(small_cfg):
    return Geometry.from_config(small_cfg)


@pytest.fixture(scope="session")
def small_samples(small_cfg, small_geom):
    return make_split(small_cfg, "train", small_geom, 4)


@pytest.fixture(scope="session")
def default_cfg():
    return make_config()


@pytest.fixture(scope="session")
def default_geom(default_cfg):
    return Geometry.from_config(default_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory, default_cfg, default_geom):
    """The full default pre-training run, shared by every test that needs a trained checkpoint."""
    from nsmae.trainer import pretrain

    out = tmp_path_factory.mktemp("default_run")
    return pretrain(default_cfg, out_dir=str(out), geom=default_geom)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        lines = request.config.stash.setdefault(_ACCEPTANCE, [])
        lines.append((number, f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"))
        return passed

    return record


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
