import pytest
import torch

from fave.config import TrainConfig
from fave.model import FaveModel


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return TrainConfig(d=16, heads=2, blocks=1, max_len=8, decoder_hidden=12,
                       time_freqs=8, batch=16, epochs1=2, epochs2=2, patience=0, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return FaveModel.from_config(tiny_config, n_items=11)


# criterion number -> (title, status, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class _Recorder:
    """``criterion(n, title, ok, detail)`` records a line and asserts ``ok``."""

    def __call__(self, n: int, title: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE[n] = (title, "PASS" if ok else "FAIL", detail)
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    def skip(self, n: int, title: str, reason: str) -> None:
        ACCEPTANCE[n] = (title, "SKIP", reason)
        pytest.skip(reason)


@pytest.fixture
def criterion():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}: {detail}")
