import os
import time

import pytest

from gmparse import experiments as E

# worker processes for the expensive session fixtures
JOBS = int(os.environ.get("GMPARSE_TEST_JOBS", "1"))

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(verdicts):
        ok, detail = verdicts[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def verdict(request):
    """``verdict(n, ok, detail)`` records one criterion line for the summary and prints it."""
    store = request.config.stash[_VERDICTS]

    def record(n, ok, detail):
        store[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


@pytest.fixture(scope="session")
def experiment_config():
    return E.ExperimentConfig()


@pytest.fixture(scope="session")
def zoo_build(tmp_path_factory, experiment_config):
    """The default zoo, trained once per session and written to disk; also returns the wall time."""
    root = tmp_path_factory.mktemp("zoo")
    start = time.perf_counter()
    data = E.build_zoo_data(experiment_config, root=root, jobs=JOBS)
    return root, data, time.perf_counter() - start


@pytest.fixture(scope="session")
def zoo_run(zoo_build):
    root, data, _ = zoo_build
    return root, data
