import numpy as np
import pytest

from mxt.encoder import ModelConfig
from mxt.model import init_params, make_batch
from mxt.synth import CatalogSpec, generate
from mxt.text import BOS, EOS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    """The 4-token, d=8 configuration used for whole-model gradient checks."""
    return ModelConfig(L=1, d=8, h=2, d_ff=16, V=12, d_v=4, grid=2, image_size=8,
                       conv_channels=(4, 4), max_target_len=4, dropout=0.0)


@pytest.fixture
def toy_params(toy_cfg):
    return init_params(toy_cfg, seed=0)


@pytest.fixture
def toy_batch(toy_cfg):
    r = np.random.default_rng(7)
    ids = [[BOS, 5, 6, 7], [BOS, 8, 9, 4]]
    px = [r.random((3, toy_cfg.image_size, toy_cfg.image_size)).astype(np.float32) for _ in ids]
    return make_batch(ids, px, [[10, EOS], [11, 4, EOS]])


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated catalog on disk (no zero-shot holdouts)."""
    root = tmp_path_factory.mktemp("tiny")
    generate(CatalogSpec(sizes={"train": 24, "val": 8, "test": 8}, zero_shot_holdout=[], seed=3), root)
    return root


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return {"L": 1, "d": 16, "h": 2, "d_ff": 32, "d_v": 4, "conv_channels": [4, 8], "grid": 4}


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance outcome; printed in the terminal summary."""
    def record(n: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[str(n)] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
