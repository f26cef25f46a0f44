import numpy as np
import pytest

from caet_swin.data import ModelInputs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_inputs(n_per_class: int, plan, seed: int = 0, max_slices: int = 6) -> ModelInputs:
    """Tiny random model inputs at a plan's resolution; class 1 gets a brighter centre."""
    g = np.random.default_rng(seed)
    ids, labels, caet, swin = [], [], [], []
    sc, ss = plan.cae.input_side, plan.swin.img_size
    for i in range(2 * n_per_class):
        y = i % 2
        k = int(g.integers(1, max_slices + 1))
        c = g.uniform(0, 0.2, size=(k, 1, sc, sc)).astype(np.float32)
        s = g.uniform(0, 0.2, size=(k, 1, ss, ss)).astype(np.float32)
        if y:
            c[..., sc // 4: 3 * sc // 4, sc // 4: 3 * sc // 4] += 0.6
            s[..., ss // 4: 3 * ss // 4, ss // 4: 3 * ss // 4] += 0.6
        ids.append(f"r{i:03d}")
        labels.append(y)
        caet.append(c)
        swin.append(s)
    return ModelInputs(ids, np.array(labels), caet, swin)


# Acceptance tests attach a one-line verdict as a user property; they are
# echoed together at the end of the run.
_VERDICTS: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _VERDICTS.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
