import pytest

from blightpatch.dataset import SynthConfig, generate_synthetic

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    results = item.config.stash[CRITERIA]
    key = marker.args
    # Any failing test, including a failing fixture, marks the whole criterion.
    if report.failed:
        results[key] = "FAIL"
    elif report.when == "call":
        results.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[CRITERIA]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), verdict in sorted(results.items()):
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")


@pytest.fixture(scope="session")
def synth_small():
    """Four small synthetic images, two of them diseased."""
    cfg = SynthConfig(image_count=4, diseased_count=2, dims=(200, 300), blob_radius=(6.0, 10.0), seed=1)
    return generate_synthetic(cfg)
