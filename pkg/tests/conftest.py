import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptcondense.vit import ViTConfig, init_params  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_config():
    return ViTConfig(num_classes=5)


@pytest.fixture
def toy_params(toy_config):
    """Seeded toy model with a non-zero head so logits carry signal."""
    params = init_params(toy_config, seed=3)
    params["head.weight"].data = np.random.default_rng(4).normal(0.0, 0.5, size=params["head.weight"].shape)
    params["head.bias"].data = np.random.default_rng(5).normal(0.0, 0.1, size=params["head.bias"].shape)
    params.freeze_backbone()
    return params


@pytest.fixture
def images(rng):
    return rng.uniform(0.0, 1.0, size=(3, 3, 32, 32))


_ACCEPTANCE: list[tuple[int, str]] = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(number, name, passed, detail)``."""

    def _report(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE, key=lambda item: item[0]):
            terminalreporter.write_line(line)
