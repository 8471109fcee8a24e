import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peak2struct import _fallback, kernels

try:
    from peak2struct import _kernels
except ImportError:  # extension not built
    _kernels = None

compiled = pytest.mark.skipif(_kernels is None, reason="compiled kernels not built")


def _backend(env_value):
    env = dict(os.environ)
    env.pop("PEAK2STRUCT_PURE_PYTHON", None)
    if env_value is not None:
        env["PEAK2STRUCT_PURE_PYTHON"] = env_value
    out = subprocess.run([sys.executable, "-c", "from peak2struct import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_env_forces_fallback():
    assert _backend("1") == "python"


@compiled
def test_compiled_by_default():
    assert _backend(None) == "cython"


def _sorted_edges(res):
    ci, mi, sh, dv, d = res
    key = np.lexsort((sh[:, 2], sh[:, 1], sh[:, 0], mi, ci))
    return ci[key], mi[key], sh[key], dv[key], d[key]


@compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_neighbors_parity(seed):
    rng = np.random.default_rng(seed)
    L = np.diag(rng.uniform(4, 9, 3)) + np.triu(rng.uniform(-1, 1, (3, 3)), 1)
    heights = 1.0 / np.linalg.norm(np.linalg.inv(L), axis=0)
    centers, copies = rng.random((int(rng.integers(1, 6)), 3)), rng.random((int(rng.integers(1, 9)), 3))
    a = _sorted_edges(_kernels.lattice_neighbors(centers, copies, L, heights, 4.5, 1e-8))
    b = _sorted_edges(_fallback.lattice_neighbors(centers, copies, L, heights, 4.5, 1e-8))
    for x, y in zip(a, b):
        np.testing.assert_allclose(np.asarray(x), np.asarray(y), atol=1e-12)


@compiled
@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_structure_factor_parity(seed):
    rng = np.random.default_rng(seed)
    n_ref, n_at, n_types = int(rng.integers(1, 50)), int(rng.integers(1, 12)), 3
    hkl = rng.integers(-6, 7, (n_ref, 3)).astype(float)
    stol2 = rng.uniform(0, 0.4, n_ref)
    xyz = rng.random((n_at, 3))
    types = rng.integers(0, n_types, n_at).astype(np.int64)
    occ, u = rng.uniform(0.5, 1, n_at), rng.uniform(0.01, 0.05, n_at)
    ftab = rng.uniform(1, 17, (n_types, n_ref))
    a = _kernels.structure_factor_sum(hkl, stol2, xyz, types, occ, u, ftab)
    b = _fallback.structure_factor_sum(hkl, stol2, xyz, types, occ, u, ftab)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_dispatch_exports():
    assert kernels.BACKEND in ("cython", "python")
    assert callable(kernels.lattice_neighbors) and callable(kernels.structure_factor_sum)
