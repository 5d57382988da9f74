"""NumPy/LAPACK reference versions of the inner loops.

Signatures and in-place semantics match the compiled module exactly.
"""
import numpy as np
from scipy.linalg.lapack import dpotrs


def sequential_code_sweep(chol, rhs, codes, coupling):
    """Gauss-Seidel pass over the columns of one class code block.

    Column ``i`` becomes ``A^{-1} (rhs[:, i] + coupling * sum_{j != i} codes[:, j])``
    using the latest values of the other columns. ``chol`` holds the lower
    Cholesky factor of ``A``. ``codes`` is overwritten.
    """
    n = codes.shape[1]
    total = codes.sum(axis=1)
    for i in range(n):
        b = rhs[:, i] + coupling * (total - codes[:, i])
        x, info = dpotrs(chol, b, lower=1)
        if info != 0:
            raise ValueError(f"dpotrs failed with info={info}")
        total += x - codes[:, i]
        codes[:, i] = x


def atom_block_sweep(atoms, cross, gram, normalize, dead_tol):
    """Atom-by-atom least-squares update of one dictionary block.

    ``cross`` is ``Z X_b^T`` and ``gram`` is ``X_b X_b^T`` for the block's code
    rows ``X_b``. Atom ``a`` is set to ``v / ||v||`` (or ``v / gram[a, a]``
    without normalization) where ``v = cross[:, a] - sum_{b != a} atoms[:, b] gram[b, a]``.
    Atoms with ``||v|| < dead_tol`` are left in place and flagged; their rows
    and columns of ``gram`` and column of ``cross`` are zeroed, matching a
    zeroed code row.
    """
    k = atoms.shape[1]
    dead = np.zeros(k, dtype=np.uint8)
    for a in range(k):
        v = cross[:, a].copy()
        for b in range(k):
            if b != a and gram[b, a] != 0.0:
                v -= gram[b, a] * atoms[:, b]
        nrm = np.sqrt(v @ v)
        if gram[a, a] <= 0.0 or nrm < dead_tol:
            dead[a] = 1
            gram[a, :] = 0.0
            gram[:, a] = 0.0
            cross[:, a] = 0.0
            continue
        atoms[:, a] = v / nrm if normalize else v / gram[a, a]
    return dead
