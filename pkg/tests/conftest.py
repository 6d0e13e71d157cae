import numpy as np
import pytest
import torch

from fantasyid.config import micro_config
from fantasyid.data import gen_data, load_dataset

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record():
    """record(n, title, passed, detail) stores one acceptance line for the summary."""
    def _record(n: int, title: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[n] = (title, passed, detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}  {detail}")


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    cfg = micro_config()
    root = tmp_path_factory.mktemp("micro_data")
    gen_data(cfg, root)
    return cfg, root, load_dataset(root, cfg)
