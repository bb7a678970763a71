import numpy as np
import pytest

from tpfl.config import ExperimentConfig
from tpfl.encoders import build_backbone


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


@pytest.fixture
def small_config():
    """A run small enough for sub-second federation tests."""
    return ExperimentConfig(M=4, K=4, T_g=3, T_loc=1, C=4, n_k=2, s=2, H=6, W=6, Ch=1, L=2, d_tok=4,
                            D=8, hidden=12, test_per_class=6, alpha=0.1, seeds=(3,))


@pytest.fixture(scope="session")
def tiny_backbone():
    return build_backbone(11, C=4, d_tok=3, L=2, image_shape=(4, 4, 2), D=6, hidden=7)


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
