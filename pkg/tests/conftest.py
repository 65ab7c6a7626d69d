import os
from pathlib import Path

import torch

import pytest

torch.set_num_threads(max(1, os.cpu_count() or 1))

_ACCEPTANCE_RESULTS = []


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE_RESULTS.append((name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{name}: {outcome.upper()}")


class DeskLab:
    """Shared desk-scale artifacts for the acceptance reproductions.

    Heavy artifacts (pretrained encoders, training runs) are memoized on disk
    under tests/_cache so repeated suite runs don't retrain; delete the
    directory for a cold run. Keys embed a version tag; bump it when training
    code changes in ways that alter results.
    """

    VERSION = "v2"

    def __init__(self, cache_root: Path):
        self.cache_root = cache_root / self.VERSION
        self.cache_root.mkdir(parents=True, exist_ok=True)
        self._mem = {}

    def memo(self, key: str, builder):
        if key in self._mem:
            return self._mem[key]
        path = self.cache_root / f"{key}.pt"
        if path.exists():
            value = torch.load(path, map_location="cpu", weights_only=False)
        else:
            value = builder()
            torch.save(value, path)
        self._mem[key] = value
        return value


@pytest.fixture(scope="session")
def desk_lab():
    root = Path(__file__).parent / "_cache"
    return DeskLab(root)


@pytest.fixture(scope="session")
def artifacts_dir():
    out = Path(__file__).parent / "_artifacts"
    out.mkdir(exist_ok=True)
    return out
