import numpy as np
import pytest
from hypothesis import settings

from ulz.core import ProblemInstance
from ulz.dictgen import GenSpec, identity_hadamard_dictionary, make_problem, sample_signal_k

# one slow CPU: wall-clock deadlines would only add flakiness
settings.register_profile("ulz", deadline=None)
settings.load_profile("ulz")


def small_problem(M=20, N=40, p=0.15, seed=0, snr_db=None):
    return make_problem(GenSpec(M, N, p, None, snr_db, seed))[0]


def hadamard_problem(M=512, k=2, seed=0):
    A = identity_hadamard_dictionary(M)
    x, _ = sample_signal_k(2 * M, k, seed)
    return ProblemInstance.from_signal(A, x, seed=seed)


@pytest.fixture
def problem():
    return small_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion -> (passed, detail); filled by test_acceptance and echoed after the run
ACCEPTANCE = {}


def record_acceptance(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
