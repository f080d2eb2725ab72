import numpy as np
import pytest

from synthpan.scene import load_scene_descriptor, miniworksite_path
from synthpan.taxonomy import from_records


@pytest.fixture(scope="session")
def miniworksite():
    return load_scene_descriptor(miniworksite_path())


@pytest.fixture
def small_taxonomy():
    return from_records([
        ("floor", (128, 64, 128), "stuff"),
        ("wall", (70, 70, 70), "stuff"),
        ("screwdriver", (0, 60, 100), "thing"),
        ("clamp", (12, 2, 1), "thing"),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        return
    item = _ACCEPTANCE.get(report.nodeid)
    if item is None:
        return
    if report.when == "call" or report.failed:
        item["outcome"] = "PASS" if report.passed and item.get("outcome") != "FAIL" else "FAIL"
        item["seconds"] = item.get("seconds", 0.0) + report.duration


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _ACCEPTANCE[item.nodeid] = {"number": number, "title": title}


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for item in sorted(_ACCEPTANCE.values(), key=lambda i: i["number"]):
        outcome = item.get("outcome", "NOT RUN")
        terminalreporter.write_line(f"{outcome:7} {item['number']}. {item['title']} ({item.get('seconds', 0):.1f} s)")
