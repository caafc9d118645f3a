import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from charcascade.classifiers import Cascade, StrongClassifier, WeakClassifier  # noqa: E402
from charcascade.features import N_CODES, Aperture, enumerate_features  # noqa: E402

_acceptance: dict[int, tuple[str, str]] = {}
_measured: dict[int, list[str]] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n = mark.args[0]
    if call.when == "setup" and call.excinfo is not None:
        status = "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL"
        _acceptance[n] = (status, item.name)
    elif call.when == "call":
        if call.excinfo is None:
            _acceptance[n] = ("PASS", item.name)
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            _acceptance[n] = ("SKIP", item.name)
        else:
            _acceptance[n] = ("FAIL", item.name)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status, name = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({name})")
        for line in _measured.get(n, []):
            terminalreporter.write_line(f"              {line}")


@pytest.fixture
def measured(request):
    """Record a measured value for the acceptance summary of this test's criterion."""
    n = request.node.get_closest_marker("acceptance").args[0]
    _measured.setdefault(n, [])

    def record(text: str) -> None:
        _measured[n].append(text)
        print(text)

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cascade(rng, kind="cs", aperture=Aperture(12, 12), stages=3, weaks=(1, 4),
                   density=0.5, label="number"):
    """Cascade of random weak classifiers drawn from the feature lattice."""
    pool = enumerate_features(aperture, kind)
    out = []
    for _ in range(stages):
        k = int(rng.integers(weaks[0], weaks[1] + 1))
        ws = []
        for f in rng.choice(len(pool), k):
            feat = pool[int(f)]
            if kind == "haar":
                lut = (rng.random(16) < density).astype(np.uint8)
                ws.append(WeakClassifier(feat, lut, (float(rng.uniform(-2000, 0)), float(rng.uniform(0, 2000)))))
            else:
                ws.append(WeakClassifier(feat, (rng.random(N_CODES[kind]) < density).astype(np.uint8)))
        alphas = rng.uniform(0.1, 2.0, k).tolist()
        theta = float(rng.uniform(0, sum(alphas)))
        out.append(StrongClassifier(ws, alphas, theta))
    return Cascade(out, aperture, label, kind)
