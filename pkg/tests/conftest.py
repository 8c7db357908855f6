import numpy as np
import pytest

from jointlap import simulate as sim
from jointlap.augment import SurvDataset


def first_subjects(long, surv, n):
    """Restrict a simulated dataset to its first n subjects."""
    keep = set(surv.subject[:n].astype(str))
    mask = np.array([s in keep for s in long.subject.astype(str)])
    sv = SurvDataset(
        surv.subject[:n], surv.time[:n], surv.event[:n], {k: v[:n] for k, v in surv.covariates.items()}
    )
    return long.subset(mask), sv


@pytest.fixture(scope="session")
def s1_small():
    cfg = sim.scenario_presets(1)
    long, surv, truth = sim.simulate(cfg, 7)
    long, surv = first_subjects(long, surv, 80)
    return cfg, long, surv, truth


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """record(n, ok, detail): one verdict line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(n, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"criterion {n}: {status} - {detail}"
        lines.append(line)
        print(line)
        if status != "SKIP":
            assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
