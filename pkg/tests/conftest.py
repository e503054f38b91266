import time
from types import SimpleNamespace

import pytest
from hypothesis import HealthCheck, settings

from cedar.fixture import FixtureSpec
from cedar.pipeline import run_all, write_fixture
from helpers import TINY_TRAINING, fixture_config

settings.register_profile("cedar", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cedar")


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory):
    """The full pipeline on the 20-type x 50-sentence planted fixture, trained once per session."""
    base = tmp_path_factory.mktemp("fixture_run")
    paths = write_fixture(base / "data", FixtureSpec(noise_rate=0.3), seed=0)
    cfg = fixture_config(paths, base / "run")
    t0 = time.perf_counter()
    results = run_all(cfg)
    return SimpleNamespace(cfg=cfg, results=results, elapsed=time.perf_counter() - t0, paths=paths,
                           work=base / "run")


@pytest.fixture(scope="session")
def tiny_fixture_paths(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny_fixture")
    spec = FixtureSpec(n_types=6, sentences_per_type=12, sentences_per_doc=4)
    return write_fixture(base, spec, seed=1)



@pytest.fixture(scope="session")
def tiny_run(tiny_fixture_paths, tmp_path_factory):
    """Every stage on the tiny fixture with near-zero training; for plumbing checks only."""
    cfg = fixture_config(tiny_fixture_paths, tmp_path_factory.mktemp("tiny_run"), TINY_TRAINING)
    return SimpleNamespace(cfg=cfg, results=run_all(cfg))


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    n, title = marker
    failed = report.failed
    prev = _ACCEPTANCE.get(n, (title, False))
    _ACCEPTANCE[n] = (title, prev[1] or failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, failed = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'FAIL' if failed else 'PASS'}  criterion {n}: {title}")
