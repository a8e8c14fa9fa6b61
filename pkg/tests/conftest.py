import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Append (criterion, passed, detail); lines are echoed now and repeated in the terminal summary."""
    log = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(n, passed, detail):
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}"
        log.append((n, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE_KEY, [])
    if log:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(log, key=lambda item: item[0]):
            terminalreporter.write_line(line)
