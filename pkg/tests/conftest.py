from collections import defaultdict
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (title, runtime bound in seconds)
CRITERIA = {
    1: ("protocol round-trip and mutation errors", 10.0),
    2: ("scripted policy branch coverage", 1.0),
    3: ("reward oracle equivalence and properties", 30.0),
    4: ("GRPO advantage and loss numerics", 60.0),
    5: ("SFT loss", 5.0),
    6: ("metrics", 5.0),
    7: ("dataset determinism and KR rate", 30.0),
    8: ("end-to-end CLI smoke", 10.0),
}

_outcomes: dict[int, list[bool]] = defaultdict(list)
_durations: dict[int, float] = defaultdict(float)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call":
        _outcomes[n].append(report.passed)
        _durations[n] += report.duration
    elif report.failed:
        _outcomes[n].append(False)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, (title, bound) in CRITERIA.items():
        if n not in _outcomes:
            terminalreporter.write_line(f"AC{n} NOT RUN  {title}")
            continue
        took = _durations[n]
        ok = all(_outcomes[n]) and took < bound
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"AC{n} {verdict}  {title}  ({len(_outcomes[n])} test(s), {took:.2f}s of {bound:g}s)"
        )


@pytest.fixture
def tasks12():
    return FIXTURES / "tasks12.jsonl"
