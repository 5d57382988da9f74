import os
import subprocess
import sys

import numpy as np
import pytest

from crosslabel import _kernels
from crosslabel.learning import _cholesky

BACKENDS = ["python"]
try:
    _kernels.get_backend("cython")
    BACKENDS.append("cython")
except ImportError:
    pass


def spd(rng, k):
    B = rng.standard_normal((k, k))
    return B @ B.T + k * np.eye(k)


@pytest.mark.parametrize("name", BACKENDS)
def test_code_sweep_is_gauss_seidel(name, rng):
    mod = _kernels.get_backend(name)
    K, n, coupling = 6, 5, 0.3
    A = spd(rng, K)
    rhs = np.asfortranarray(rng.standard_normal((K, n)))
    X0 = rng.standard_normal((K, n))
    X = np.array(X0, order="F")
    mod.sequential_code_sweep(_cholesky(A), rhs, X, coupling)
    ref = X0.copy()
    for i in range(n):
        others = ref.sum(axis=1) - ref[:, i]
        ref[:, i] = np.linalg.solve(A, rhs[:, i] + coupling * others)
    np.testing.assert_allclose(X, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_atom_sweep_matches_loop(name, rng):
    mod = _kernels.get_backend(name)
    M, k = 7, 4
    atoms0 = rng.standard_normal((M, k))
    Xb = rng.standard_normal((k, 20))
    Z = rng.standard_normal((M, 20))
    for normalize in (True, False):
        atoms = np.array(atoms0, order="F")
        dead = mod.atom_block_sweep(atoms, np.asfortranarray(Z @ Xb.T),
                                    np.asfortranarray(Xb @ Xb.T), normalize, 1e-10)
        assert not np.any(dead)
        ref = atoms0.copy()
        for a in range(k):
            R = Z - np.delete(ref, a, axis=1) @ np.delete(Xb, a, axis=0)
            v = R @ Xb[a]
            ref[:, a] = v / np.linalg.norm(v) if normalize else v / (Xb[a] @ Xb[a])
        np.testing.assert_allclose(atoms, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_atom_sweep_flags_zero_row(name, rng):
    mod = _kernels.get_backend(name)
    Xb = rng.standard_normal((3, 10))
    Xb[1] = 0.0
    Z = rng.standard_normal((5, 10))
    atoms = np.asfortranarray(rng.standard_normal((5, 3)))
    before = atoms[:, 1].copy()
    dead = mod.atom_block_sweep(atoms, np.asfortranarray(Z @ Xb.T),
                                np.asfortranarray(Xb @ Xb.T), True, 1e-10)
    assert list(dead) == [0, 1, 0]
    np.testing.assert_array_equal(atoms[:, 1], before)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
def test_backends_agree(rng):
    py, cy = (_kernels.get_backend(n) for n in ("python", "cython"))
    K, n = 30, 12
    chol = _cholesky(spd(rng, K))
    rhs = np.asfortranarray(rng.standard_normal((K, n)))
    X0 = rng.standard_normal((K, n))
    a, b = np.array(X0, order="F"), np.array(X0, order="F")
    py.sequential_code_sweep(chol, rhs, a, 0.2)
    cy.sequential_code_sweep(chol, rhs, b, 0.2)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


def test_env_var_forces_fallback():
    code = "from crosslabel import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, CROSSLABEL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")
