import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from austgl.config import desk_train_config  # noqa: E402
from austgl.data import generate_synthetic, scan_dataset  # noqa: E402
from austgl.train import train_detector  # noqa: E402

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _criterion_of.get(report.nodeid)
    if marker is None:
        return
    num, title = marker
    ok, _ = _criteria.get(num, (True, title))
    _criteria[num] = (ok and report.outcome == "passed", title)


_criterion_of = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        ok, title = _criteria[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num}: {title}")


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """4 videos x 16 frames, the overfit dataset."""
    return generate_synthetic(tmp_path_factory.mktemp("synth"), 4, 16, rng_seed=0)


@pytest.fixture(scope="session")
def ragged_root(tmp_path_factory):
    """Videos whose lengths need padding at evaluation time."""
    return generate_synthetic(tmp_path_factory.mktemp("ragged"), 3, [35, 10, 20], rng_seed=3)


@pytest.fixture(scope="session")
def overfit_run(synth_root, tmp_path_factory):
    """Full model, desk preset, 500 steps on the overfit dataset; shared by several tests."""
    import time

    out = tmp_path_factory.mktemp("overfit")
    cfg = desk_train_config(dataset=str(synth_root), eval_every=100)
    start = time.perf_counter()
    model, history = train_detector(cfg, scan_dataset(synth_root), out_dir=out)
    history["seconds"] = time.perf_counter() - start
    return {"model": model, "history": history, "out": out, "cfg": cfg, "root": synth_root}
