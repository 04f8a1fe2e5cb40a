import os
import subprocess
import sys

import numpy as np
import pytest

from disdca import kernels
from disdca._jit import JIT_ENABLED, python_impl
from disdca.model import LOSS_CODES


@pytest.mark.skipif(not JIT_ENABLED, reason="compiled kernels disabled")
@pytest.mark.parametrize("kind", sorted(LOSS_CODES))
def test_python_kernels_agree_with_compiled(kind):
    code = LOSS_CODES[kind]
    py_inc = python_impl(kernels.dual_increment)
    py_conj = python_impl(kernels.conj_neg)
    rng = np.random.default_rng(0)
    for _ in range(300):
        y = float(rng.choice([-1.0, 1.0]))
        alpha = y * rng.uniform(0, 1)
        args = (code, alpha, rng.uniform(-2, 2), rng.uniform(0, 1), float(rng.integers(1, 50)),
                10 ** rng.uniform(-4, 0), float(rng.integers(10, 5000)), y, True)
        a, b = kernels.dual_increment(*args), py_inc(*args)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-14)
        assert kernels.conj_neg(code, alpha, y) == pytest.approx(py_conj(code, alpha, y), rel=1e-12, abs=1e-15)


def _solve(tmp_path, name, disable):
    env = dict(os.environ)
    env["DISDCA_DISABLE_JIT"] = "1" if disable else "0"
    out = tmp_path / name
    cmd = [sys.executable, "-m", "disdca", "solve", "--set", "data.synthetic.groups=4", "--set",
           "data.synthetic.points=30", "--set", "K=3", "--set", "m=20", "--set", "T=5", "--set",
           "partition.scheme=random", "--set", f"output.path={out}"]
    subprocess.run(cmd, env=env, check=True, capture_output=True, timeout=300)
    return out.read_bytes()


def test_fallback_matches_compiled_run(tmp_path):
    assert _solve(tmp_path, "py.csv", True) == _solve(tmp_path, "jit.csv", False)


def test_benchmark_script_runs():
    bench = os.path.join(os.path.dirname(__file__), os.pardir, "benchmarks", "bench_kernels.py")
    proc = subprocess.run([sys.executable, bench, "--groups", "2", "--points", "20", "--steps", "50", "--repeat", "1"],
                          capture_output=True, text=True, timeout=600, check=True)
    assert "worker_round" in proc.stdout and "speed-up" in proc.stdout
