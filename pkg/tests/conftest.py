import pytest
import torch

from rcagraph import ScenarioConfig, emit_dataset, validate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_sim_dir(tmp_path_factory):
    """A small simulated dataset shared by pipeline and CLI tests."""
    cfg = ScenarioConfig(n_services=5, n_cases=60, seed=11)
    return emit_dataset(cfg, tmp_path_factory.mktemp("small") / "data")


@pytest.fixture(scope="session")
def small_sim(small_sim_dir):
    return validate_dataset(small_sim_dir)


# -- acceptance summary: one line per criterion ----------------------------------------

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "details": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["details"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        detail = f"  ({', '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}{detail}")
