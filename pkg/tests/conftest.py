import re

import numpy as np
import pytest
from hypothesis import settings

from dress.model import ModelConfig, init_model

settings.register_profile("dress", max_examples=40, deadline=None)
settings.load_profile("dress")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=12, d1=8, d2=16, layers=2, vocab=20, n_max=10, heads=2, seed=3)


@pytest.fixture
def tiny_params(tiny_cfg):
    """Random init with non-trivial gains and offsets."""
    p = init_model(tiny_cfg)
    r = np.random.default_rng(7)
    for k in p.tensors:
        if k.split(".")[-1].startswith(("alpha", "beta")):
            p.tensors[k] = p.tensors[k] + 0.3 * r.standard_normal(p.tensors[k].shape)
    return p


@pytest.fixture
def tiny_tokens(tiny_cfg):
    return np.random.default_rng(11).integers(0, tiny_cfg.vocab, size=(3, tiny_cfg.n_max))


# acceptance criteria record their outcome here; printed once at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Return ``record(ok, detail)`` for the criterion named by the test (``test_c<n>_...``)."""
    num = int(re.match(r"test_c(\d+)_", request.node.name).group(1))

    def record(ok, detail):
        ACCEPTANCE[num] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
