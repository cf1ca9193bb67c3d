"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""
import pytest

_verdicts = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_verdicts] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and call.excinfo is not None and not detail:
        detail = call.excinfo.exconly().splitlines()[0][:200]
    verdict = "PASS" if report.passed else "FAIL"
    line = f"{marker.args[0]} {verdict} {detail}".rstrip()
    item.config.stash[_verdicts][marker.args[0]] = line
    reporter = item.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_verdicts]
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for key in sorted(verdicts, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(verdicts[key])
