import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def central_difference_gradient(fn, x, h=1e-6):
    """Gradient of a scalar function by central differences, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# -- acceptance bookkeeping --------------------------------------------------------

ACCEPTANCE: dict = {}  # criterion number -> (passed, one-line detail)
IDENTITY = {"checked": 0, "worst": 0.0}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def identity_gap(tm) -> float:
    pmt, pnt = tm.pmt_pnt()
    return abs(tm.et() - (0.5 + (pmt - pnt) / 2))


def check_identity(tm) -> None:
    gap = identity_gap(tm)
    IDENTITY["checked"] += 1
    IDENTITY["worst"] = max(IDENTITY["worst"], gap)
    if gap > 1e-12:
        raise AssertionError(f"mean-p identity off by {gap:.3e} on a {tm.n}x{tm.n} transfer matrix")


@pytest.fixture(scope="session", autouse=True)
def transfer_matrix_identity_guard():
    """Check the mean-p identity on every transfer matrix built in this process."""
    from etdetect.detector import TransferMatrix
    original = TransferMatrix.__post_init__

    def checked(self):
        original(self)
        check_identity(self)

    TransferMatrix.__post_init__ = checked
    yield
    TransferMatrix.__post_init__ = original


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 15):
        passed, detail = ACCEPTANCE.get(number, (None, "did not reach a verdict (see errors above)"))
        verdict = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
    terminalreporter.write_line(f"transfer matrices checked for the mean-p identity: {IDENTITY['checked']}, "
                                f"worst gap {IDENTITY['worst']:.1e}")


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """IDX export of the bundled MNIST subset (or ``$ETDETECT_DATA`` when it is set)."""
    env = os.environ.get("ETDETECT_DATA")
    if env and any((Path(env) / n).exists() for n in ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz")):
        return Path(env)
    pytest.importorskip("mlxtend")
    from etdetect.data import export_mnist_subset
    d = tmp_path_factory.mktemp("mnist")
    export_mnist_subset(d, seed=0)
    return d
