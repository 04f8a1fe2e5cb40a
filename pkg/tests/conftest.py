import sys

import numpy as np
import pytest

from disdca import binarize_labels, generate_synthetic, orthogonality_residual, partition, run_sdca_reference


@pytest.fixture(scope="session")
def ortho_instance():
    """5 groups x 5 features x 200 points, sign labels, block partition over 5 workers."""
    ds = binarize_labels(generate_synthetic(5, 5, 200, seed=1))
    part = partition(ds, 5, "block")
    return ds, part, orthogonality_residual(ds, part)


@pytest.fixture(scope="session")
def ortho_reference(ortho_instance):
    ds, _, _ = ortho_instance
    return run_sdca_reference(ds, 1e-3, "squared_hinge", gap_tol=1e-10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, text = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
