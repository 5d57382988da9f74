"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Times the two inner loops in isolation on YaleB-sized blocks, then a short
end-to-end training run with each backend, and checks that both backends
agree numerically.
"""
import argparse
import time

import numpy as np

from crosslabel import _kernels, learning
from crosslabel.dataset import LabeledDataset
from crosslabel.dictionary import build_layout
from crosslabel.learning import Hyperparameters, _cholesky


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def code_sweep_case(rng, K=380, n=32, M=300):
    D = rng.standard_normal((M, K))
    D /= np.linalg.norm(D, axis=0)
    A = D.T @ D + 1.002 * np.eye(K)
    A[np.arange(30, K), np.arange(30, K)] += 200.0
    chol = np.asfortranarray(_cholesky(A))
    rhs = np.asfortranarray(D.T @ rng.standard_normal((M, n)))
    X0 = np.asfortranarray(rng.standard_normal((K, n)))
    return chol, rhs, X0, 1.0 / (n - 1)


def atom_sweep_case(rng, M=300, k=40, n=1216):
    atoms = rng.standard_normal((M, k))
    atoms /= np.linalg.norm(atoms, axis=0)
    Xb = rng.standard_normal((k, n))
    Z = rng.standard_normal((M, n))
    return np.asfortranarray(atoms), np.asfortranarray(Z @ Xb.T), np.asfortranarray(Xb @ Xb.T)


def training_case(rng, M=300, C=38, per_class=32, k=10):
    means = rng.standard_normal((M, C))
    Y = np.repeat(means, per_class, axis=1) + 0.3 * rng.standard_normal((M, C * per_class))
    ds = LabeledDataset.from_arrays(Y / np.linalg.norm(Y, axis=0), np.repeat(np.arange(1, C + 1), per_class))
    return ds, build_layout(C, k, 0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--iters", type=int, default=5)
    args = ap.parse_args()

    backends = {"python": _kernels.get_backend("python")}
    try:
        backends["cython"] = _kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels unavailable; timing the fallback only")

    rng = np.random.default_rng(0)
    chol, rhs, X0, coupling = code_sweep_case(rng)
    atoms, cross, gram = atom_sweep_case(rng)
    ds, layout = training_case(rng)
    hp = Hyperparameters(max_iters=args.iters, rel_tol=1e-12)

    results, outputs = {}, {}
    for name, mod in backends.items():
        def sweep():
            X = X0.copy(order="F")
            mod.sequential_code_sweep(chol, rhs, X, coupling)
            return X

        def atoms_run():
            A = atoms.copy(order="F")
            mod.atom_block_sweep(A, cross.copy(order="F"), gram.copy(order="F"), True, 1e-10)
            return A

        def fit():
            saved = (_kernels.sequential_code_sweep, _kernels.atom_block_sweep)
            _kernels.sequential_code_sweep = mod.sequential_code_sweep
            _kernels.atom_block_sweep = mod.atom_block_sweep
            try:
                return learning.train(ds, layout, hp)
            finally:
                _kernels.sequential_code_sweep, _kernels.atom_block_sweep = saved

        results[name] = (
            best_of(sweep, args.repeat),
            best_of(atoms_run, args.repeat),
            best_of(fit, 1),
        )
        outputs[name] = (sweep(), atoms_run(), fit().history[-1].total)

    print(f"{'backend':>8} {'code sweep ms':>14} {'atom sweep ms':>14} {'train s':>10}")
    for name, (a, b, c) in results.items():
        print(f"{name:>8} {a * 1e3:14.3f} {b * 1e3:14.3f} {c:10.3f}")
    if len(results) == 2:
        p, c = results["python"], results["cython"]
        print(f"{'speedup':>8} {p[0] / c[0]:14.2f} {p[1] / c[1]:14.2f} {p[2] / c[2]:10.2f}")
        op, oc = outputs["python"], outputs["cython"]
        print("max |diff| code sweep:", float(np.abs(op[0] - oc[0]).max()))
        print("max |diff| atom sweep:", float(np.abs(op[1] - oc[1]).max()))
        print("relative diff final objective:", abs(op[2] - oc[2]) / op[2])


if __name__ == "__main__":
    main()
