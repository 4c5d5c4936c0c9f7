import numpy as np
import pytest

from mslcl.autodiff import finite_difference_grad


def rel_err(a, b) -> float:
    """l2 relative error between two arrays; 0 when both are zero."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(loss_fn, param, eps=1e-5):
    """Finite-difference gradient of ``loss_fn()`` w.r.t. one parameter tensor."""
    def f(v):
        saved = param.values
        param.values = v
        try:
            return loss_fn()
        finally:
            param.values = saved
    return finite_difference_grad(f, param, eps).values


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria report one line each at the end of the session.
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
