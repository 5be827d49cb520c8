import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskoracle import _kernels_py, kernels

try:
    from riskoracle import _kernels
except ImportError:  # extension not built
    _kernels = None


def rows(rng, m, d):
    p = rng.random((m, d)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


def js_oracle(p, r):
    mid = 0.5 * (p + r)
    return 0.5 * np.sum(p * np.log(p / mid)) + 0.5 * np.sum(r * np.log(r / mid))


def test_fallback_matches_scalar_definition():
    rng = np.random.default_rng(0)
    p = rows(rng, 5, 4)
    J = _kernels_py.pairwise_js(p)
    for i in range(5):
        for j in range(5):
            assert J[i, j] == pytest.approx(js_oracle(p[i], p[j]), abs=1e-12)
    assert np.all(np.diag(J) == 0)


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.integers(2, 12))
def test_compiled_matches_fallback(seed, m, d):
    rng = np.random.default_rng(seed)
    p = rows(rng, m, d)
    g = rng.normal(size=(m, m))
    np.testing.assert_allclose(_kernels.pairwise_js(p), _kernels_py.pairwise_js(p), atol=1e-13)
    np.testing.assert_allclose(_kernels.pairwise_js_grad(p, g), _kernels_py.pairwise_js_grad(p, g),
                               atol=1e-12)


def test_environment_forces_fallback():
    env = dict(os.environ, RISKORACLE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from riskoracle import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == ("cython" if _kernels is not None else "python")
