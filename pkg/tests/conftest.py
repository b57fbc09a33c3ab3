import numpy as np
import pytest
from hypothesis import settings

from shadowpeft.config import AdapterConfig, BaseConfig, ShadowConfig
from shadowpeft.numerics.alloc import tune_allocator
from shadowpeft.pipeline import ShadowPEFTModel

tune_allocator()

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfgs():
    base = BaseConfig(vocab_size=11, d_model=16, n_layers=3, n_heads=2, d_ff=24, max_seq=8)
    shadow = ShadowConfig(n_layers=1, d_model=8, n_heads=2, d_ff=12)
    adapter = AdapterConfig(rank=3, inject_dropout=0.0, update_dropout=0.0)
    return base, shadow, adapter


@pytest.fixture
def small_model(small_cfgs):
    base, shadow, adapter = small_cfgs
    return ShadowPEFTModel.build(base, shadow, adapter, seed=3)


def randomize_adapters(model, seed=0, std=0.3):
    """Give every trainable tensor (including zero-initialized ones) random values."""
    rng = np.random.default_rng(seed)
    for _, t in model.trainable_named():
        t.data += rng.normal(0.0, std, size=t.shape).astype(t.dtype)


# one verdict line per acceptance criterion, from the actual test outcomes

_verdicts: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    v = _verdicts.setdefault(n, {"title": title, "ok": True, "detail": []})
    v["ok"] &= rep.passed
    detail = item.user_properties and dict(item.user_properties).get("detail")
    if rep.when == "call" and detail:
        v["detail"].append(detail)
    if rep.failed:
        v["detail"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        v = _verdicts[n]
        line = f"criterion {n:>2} {'PASS' if v['ok'] else 'FAIL'}  {v['title']}"
        if v["detail"]:
            line += "  [" + "; ".join(v["detail"]) + "]"
        terminalreporter.write_line(line)
