import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tagi import tensor as T
from tagi.model import ModelConfig

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


TINY = ModelConfig(d_model=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=32,
                   max_len=32, lora_rank=2, gen_hidden=16, id_dim=8)
SMALL = ModelConfig(d_model=16, n_enc_layers=2, n_dec_layers=2, n_heads=2, d_ff=32,
                    max_len=48, lora_rank=2, gen_hidden=16, id_dim=8)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture(autouse=True)
def _clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok or self.detail else f"{exc_type.__name__}: {exc}"
        ACCEPTANCE[self.number] = (ok, self.title, detail)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
