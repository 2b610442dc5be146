import pytest

from endogov.kg.graph import build_graph, load_corpus
from endogov.ruleset import load_ruleset


@pytest.fixture(scope="session")
def rs():
    return load_ruleset()


@pytest.fixture(scope="session")
def corpus():
    return load_corpus()


@pytest.fixture(scope="session")
def graph(corpus, rs):
    return build_graph(corpus, rs)


# --- acceptance summary -----------------------------------------------------
# Tests marked ``acceptance(n, title)`` report one PASS/FAIL line each at the
# end of the run, in criterion order.

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): a numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    ok = _acceptance.get(number, (title, True))[1]
    if rep.failed or (rep.when == "call" and not rep.passed):
        ok = False
    _acceptance[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok = _acceptance[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}")
