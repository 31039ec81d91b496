import numpy as np
import pytest

from flexmore.synth import SplitMix64, random_matrix
from flexmore.weights import ExpertBundle


def seeded(seed, rows, cols, scale=1.0):
    return random_matrix(SplitMix64(seed), rows, cols, scale)


def seeded_bundle(seed, name="b", shapes=(("w1", 6, 4), ("w2", 4, 6)), scale=1.0):
    rng = SplitMix64(seed)
    return ExpertBundle(name, {t: random_matrix(rng, r, c, scale) for t, r, c in shapes})


def power_iteration_singular_values(a, iters=5000, tol=1e-15):
    """Singular values as sqrt of eigenvalues of a^T a, by power iteration with deflation."""
    g = a.T @ a
    n = g.shape[0]
    out = []
    start = np.linspace(1.0, 2.0, n)
    for _ in range(n):
        v = start / np.linalg.norm(start)
        lam = 0.0
        for _ in range(iters):
            w = g @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                lam = 0.0
                break
            w /= nw
            new_lam = float(w @ g @ w)
            if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)) and np.linalg.norm(w - v) < 1e-13:
                lam = new_lam
                v = w
                break
            lam, v = new_lam, w
        out.append(np.sqrt(max(lam, 0.0)))
        g = g - lam * np.outer(v, v)
    return np.array(out)


@pytest.fixture
def rng():
    return SplitMix64(12345)


# --- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and rep.passed:
        return
    number, title = mark.args
    if rep.when == "call" or rep.failed:
        _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({seconds:.2f}s)")
