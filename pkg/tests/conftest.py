import numpy as np
import pytest

from crosslabel.dataset import LabeledDataset


def make_blobs(seed, M=20, C=3, n_train=30, n_test=30, separation=4.0, sigma=1.0):
    """Isotropic Gaussian classes whose means are ``separation`` within-class
    standard deviations apart, the deviation measured as the RMS distance of a
    sample to its class mean (``sigma * sqrt(M)``)."""
    rng = np.random.default_rng(seed)
    radius = separation * sigma * np.sqrt(M) / np.sqrt(2.0)
    means = radius * np.eye(M)[:, :C]

    def draw(n):
        Y = np.hstack([means[:, [c]] + sigma * rng.standard_normal((M, n)) for c in range(C)])
        return LabeledDataset.from_arrays(Y, np.repeat(np.arange(1, C + 1), n))

    return draw(n_train), draw(n_test)


def unit_columns(rng, M, K):
    D = rng.standard_normal((M, K))
    return D / np.linalg.norm(D, axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(0)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(label: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
