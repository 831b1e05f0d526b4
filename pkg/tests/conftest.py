import numpy as np
import pytest

from dsalab import data as D
from dsalab import tensor as T
from dsalab.vit import ViTConfig, init_params


@pytest.fixture(autouse=True)
def _clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def micro_cfg():
    # 4 patches of a 3-channel 8x8 image, two layers
    return ViTConfig(image_hw=(8, 8), channels=3, patch_size=4, embed_dim=8, num_layers=2,
                     num_heads=2, ffn_hidden=16, head_hidden=8)


@pytest.fixture
def micro_params(micro_cfg):
    return init_params(micro_cfg, seed=3)


@pytest.fixture(scope="session")
def small_data():
    return D.generate(D.DatasetSpec(n_train=64, n_test=64, rho=0.95, seed=1))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
