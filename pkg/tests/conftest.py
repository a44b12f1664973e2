import numpy as np
import pytest

from pcg_hinf.signal_dsp import Waveform

FS = 2000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, seconds=1.0, fs=FS, amp=1.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return Waveform(amp * np.sin(2 * np.pi * freq * t), fs)


# --- acceptance report ----------------------------------------------------------
# Tests marked ``acceptance(n, title)`` are summarised as one line per criterion.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    mark = getattr(report, "_acceptance", None)
    if mark is None:
        return
    n, title = mark
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "detail": []})
    if report.failed:
        entry["ok"] = False
    for name, text in report.user_properties:
        if name == "detail" and text not in entry["detail"]:
            entry["detail"].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        report._acceptance = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["detail"]:
            line += "  [" + "; ".join(e["detail"]) + "]"
        terminalreporter.write_line(line)
