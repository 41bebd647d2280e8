import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ditbs.data import synthetic_dataset
from ditbs.model import DiTConfig, ToyDiT

settings.register_profile("ditbs", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ditbs")

# small enough that a forward pass is well under a millisecond
TINY = DiTConfig(depth=4, hidden=16, heads=2, patch=4, img_size=8, vocab=32, n_text=4)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return ToyDiT(TINY, seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic_dataset(n=3, size=64, seed=0)


def random_batch(cfg, rng, batch=1, size=None):
    size = cfg.img_size if size is None else size
    x = rng.standard_normal((batch, cfg.n_img(size), cfg.token_dim)).astype(np.float32)
    ids = rng.integers(0, cfg.vocab, (batch, cfg.n_text))
    t = rng.integers(0, cfg.max_t + 1, batch)
    return x, ids, t


# ---------------------------------------------------------------------------
# acceptance summary: tests record ("criterion", text) and ("detail", text)

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE.append((props["criterion"], report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, outcome, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{tag}] {crit}: {detail}")
