import numpy as np
import pytest

from crosslabel.dataset import LabeledDataset
from crosslabel.dictionary import StructuredDictionary, build_layout, suppression_selector
from crosslabel.errors import FactorizationError, InsufficientSamplesError
from crosslabel.laplacian import BlockLaplacian, class_laplacian
from crosslabel.learning import (
    Hyperparameters,
    code_column_gradient,
    init_codes,
    init_dictionary,
    kmeans,
    objective,
    train,
    update_atoms_class,
    update_codes,
    update_codes_class,
)

from conftest import make_blobs, unit_columns


def random_problem(rng, M=8, C=2, n=5, per=4, shared=2):
    lay = build_layout(C, per, shared)
    D = unit_columns(rng, M, lay.n_atoms)
    Y = rng.standard_normal((M, C * n))
    X = rng.standard_normal((lay.n_atoms, C * n))
    return lay, D, Y, X, BlockLaplacian.from_class_sizes([n] * C)


def test_hyperparameter_validation():
    for bad in (dict(beta=0.0), dict(lam=-1.0), dict(gamma=np.inf), dict(max_iters=0),
                dict(rel_tol=0.0), dict(code_update_mode="jacobi"), dict(init="zeros")):
        with pytest.raises(ValueError):
            Hyperparameters(**bad)


# --- k-means ---------------------------------------------------------------

def test_kmeans_k_equals_n(rng):
    P = rng.standard_normal((4, 5))
    C = kmeans(P, 5, seed=1)
    target = P / np.linalg.norm(P, axis=0)
    # every normalized point appears exactly once
    dots = np.abs(C.T @ target)
    assert np.allclose(np.sort(dots.max(axis=0)), 1.0)
    assert sorted(np.argmax(dots, axis=0)) == list(range(5))


def test_kmeans_single_cluster(rng):
    P = rng.standard_normal((6, 30)) + 3.0
    m = P.mean(axis=1)
    np.testing.assert_allclose(kmeans(P, 1)[:, 0], m / np.linalg.norm(m), atol=1e-12)


def test_kmeans_two_blobs(rng):
    a, b = np.array([10.0, 0.0]), np.array([0.0, 10.0])
    P = np.hstack([a[:, None] + rng.standard_normal((2, 50)), b[:, None] + rng.standard_normal((2, 50))])
    C = kmeans(P, 2, seed=3)
    truth = [P[:, :50].mean(axis=1), P[:, 50:].mean(axis=1)]
    truth = [t / np.linalg.norm(t) for t in truth]
    got = sorted(C.T.tolist())
    want = sorted(t.tolist() for t in truth)
    np.testing.assert_allclose(got, want, atol=0.1)


def test_kmeans_determinism_and_errors(rng):
    P = rng.standard_normal((5, 40))
    np.testing.assert_array_equal(kmeans(P, 4, seed=9), kmeans(P, 4, seed=9))
    with pytest.raises(InsufficientSamplesError):
        kmeans(P, 41)
    with pytest.raises(InsufficientSamplesError):
        kmeans(P, 0)


def test_kmeans_zero_centroid_replaced():
    P = np.array([[1.0, -1.0, 3.0], [0.0, 0.0, 0.0]])
    C = kmeans(P, 2, seed=0)
    np.testing.assert_allclose(np.linalg.norm(C, axis=0), 1.0)
    assert np.all(np.isfinite(C))


# --- initialization --------------------------------------------------------

def test_init_dictionary_no_shared(blobs):
    train_set, _ = blobs
    hp = Hyperparameters()
    D = init_dictionary(train_set, build_layout(3, 3, 0), hp)
    assert D.part(0).shape == (20, 0)
    # class 1 is clustered first from a generator seeded with hp.seed
    first = kmeans(train_set.class_block(1), 3, hp.kmeans_iters, hp.kmeans_restarts,
                   np.random.default_rng(hp.seed))
    np.testing.assert_array_equal(D.part(1), first)


def test_init_dictionary_constant_class():
    u = np.zeros(5)
    u[2] = 1.0
    ds = LabeledDataset.from_arrays(np.tile(u[:, None], (1, 4)), [1, 1, 1, 1])
    D = init_dictionary(ds, build_layout(1, 1), Hyperparameters())
    np.testing.assert_allclose(np.abs(D.atoms[:, 0]), u)


def test_init_dictionary_yale_shape(rng):
    Y = rng.random((576, 90))
    ds = LabeledDataset.from_arrays(Y, np.repeat(np.arange(1, 16), 6))
    D = init_dictionary(ds, build_layout(15, 4, 5), Hyperparameters())
    assert isinstance(D, StructuredDictionary) and D.atoms.shape == (576, 65)


def test_init_dictionary_errors(blobs):
    train_set, _ = blobs
    with pytest.raises(InsufficientSamplesError):
        init_dictionary(train_set, build_layout(3, 31), Hyperparameters())
    with pytest.raises(InsufficientSamplesError):
        init_dictionary(train_set, build_layout(3, 30, 1), Hyperparameters(init="random"))


def test_init_random_uses_samples(blobs):
    train_set, _ = blobs
    D = init_dictionary(train_set, build_layout(3, 2, 1), Hyperparameters(init="random"))
    Yn = train_set.features / np.linalg.norm(train_set.features, axis=0)
    assert np.allclose(np.max(D.atoms.T @ Yn, axis=1), 1.0)


def test_init_codes_examples(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    Y = rng.standard_normal((6, 4))
    np.testing.assert_allclose(init_codes(Y, Q, 1e-12), Q.T @ Y, atol=1e-10)
    d = unit_columns(rng, 4, 1)
    np.testing.assert_allclose(init_codes(d, d, 1.0), [[0.5]], rtol=1e-14)
    D = unit_columns(rng, 10, 7)
    Y = rng.standard_normal((10, 12))
    X = init_codes(Y, D, 0.3)
    assert np.linalg.norm((D.T @ D + 0.3 * np.eye(7)) @ X - D.T @ Y) < 1e-10


# --- code update -----------------------------------------------------------

def test_codes_reduce_to_ridge(rng):
    lay, D, Y, X, L = random_problem(rng)
    for mode in ("sequential", "batch"):
        hp = Hyperparameters(beta=0.1, lam=0.0, gamma=0.0, code_update_mode=mode)
        Xc = update_codes_class(Y[:, :5], D, suppression_selector(lay, 1), L.blocks[0], X[:, :5], hp)
        np.testing.assert_allclose(Xc, init_codes(Y[:, :5], D, 0.1), rtol=1e-10, atol=1e-12)


def test_single_sample_batch_formula(rng):
    lay, D, Y, X, _ = random_problem(rng, n=1)
    sel = suppression_selector(lay, 2)
    hp = Hyperparameters(beta=0.05, lam=3.0, gamma=2.0, code_update_mode="batch")
    got = update_codes_class(Y[:, 1:2], D, sel, class_laplacian(1), X[:, 1:2], hp)
    A = D.T @ D + 3.0 * np.diag(sel.mask()) + 2.05 * np.eye(lay.n_atoms)
    want = np.linalg.solve(A, D.T @ Y[:, 1:2] + 2.0 * X[:, 1:2])
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_batch_solve_residual(rng):
    lay, D, Y, X, L = random_problem(rng)
    sel = suppression_selector(lay, 1)
    hp = Hyperparameters(beta=0.02, lam=50.0, gamma=3.0, code_update_mode="batch")
    Xc = update_codes_class(Y[:, :5], D, sel, L.blocks[0], X[:, :5], hp)
    A = D.T @ D + 50.0 * np.diag(sel.mask()) + 3.02 * np.eye(lay.n_atoms)
    rhs = D.T @ Y[:, :5] - 3.0 * X[:, :5] @ (L.blocks[0].dense() - np.eye(5))
    assert np.linalg.norm(A @ Xc - rhs) / np.linalg.norm(rhs) < 1e-9


def test_sequential_columns_are_exact_minimizers(rng):
    lay, D, Y, X, L = random_problem(rng)
    sel = suppression_selector(lay, 2)
    hp = Hyperparameters(beta=0.01, lam=20.0, gamma=4.0)
    Xc = update_codes_class(Y[:, 5:], D, sel, L.blocks[1], X[:, 5:], hp)
    # after the sweep the last column is stationary given the final state
    g = code_column_gradient(Y[:, 9], D, sel, L.blocks[1], Xc, 4, hp)
    assert np.linalg.norm(g) < 1e-9


def test_batch_and_sequential_equal_without_coupling(rng):
    lay, D, Y, X, L = random_problem(rng)
    a = update_codes(Y, D, X, lay, L, Hyperparameters(beta=0.1, lam=7.0, gamma=0.0))
    b = update_codes(Y, D, X, lay, L, Hyperparameters(beta=0.1, lam=7.0, gamma=0.0,
                                                       code_update_mode="batch"))
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_parallel_batch_matches_serial(rng):
    lay, D, Y, X, L = random_problem(rng, C=4)
    hp = Hyperparameters(code_update_mode="batch")
    np.testing.assert_array_equal(update_codes(Y, D, X, lay, L, hp, jobs=1),
                                  update_codes(Y, D, X, lay, L, hp, jobs=3))


def test_non_finite_input_raises_factorization_error(rng):
    lay, D, Y, X, L = random_problem(rng)
    D = D.copy()
    D[0, 0] = np.nan
    with pytest.raises(FactorizationError) as info:
        update_codes_class(Y[:, :5], D, suppression_selector(lay, 1), L.blocks[0], X[:, :5],
                           Hyperparameters())
    assert info.value.class_index == 1


# --- atom update -----------------------------------------------------------

def test_single_atom_single_sample(rng):
    y = rng.standard_normal((5, 1))
    lay = build_layout(1, 1)
    atoms, _ = update_atoms_class(y, np.ones((1, 1)), unit_columns(rng, 5, 1), lay, 1,
                                  Hyperparameters())
    np.testing.assert_allclose(atoms[:, 0], y[:, 0] / np.linalg.norm(y), rtol=1e-12)


def test_atom_update_least_squares(rng):
    lay, D, Y, X, _ = random_problem(rng)
    for c in range(3):
        atoms, _ = update_atoms_class(Y, X, D, lay, c, Hyperparameters(), normalize=False)
        blk = lay.block(c)
        ref = D.copy()
        for a in range(blk.start, blk.stop):
            R = Y - np.delete(ref, a, axis=1) @ np.delete(X, a, axis=0)
            ref[:, a] = R @ X[a] / (X[a] @ X[a])
        np.testing.assert_allclose(atoms, ref, rtol=1e-10, atol=1e-12)
        outside = np.setdiff1d(np.arange(lay.n_atoms), lay.indices(c))
        np.testing.assert_array_equal(atoms[:, outside], D[:, outside])


def test_dead_atom_replacement(rng):
    lay, D, Y, X, _ = random_problem(rng)
    X[2] = 0.0  # first atom of class 1 (two shared atoms precede it)
    atoms, X2 = update_atoms_class(Y, X, D, lay, 1, Hyperparameters(), class_offsets=[0, 5, 10])
    np.testing.assert_allclose(np.linalg.norm(atoms, axis=0), 1.0)
    np.testing.assert_array_equal(X2[2], 0.0)
    Yn = Y / np.linalg.norm(Y, axis=0)
    assert np.isclose(np.max(np.abs(Yn.T @ atoms[:, 2])), 1.0)
    assert X[2].sum() == 0 and not np.shares_memory(X, X2)


def test_fast_restricted_update_uses_class_columns(rng):
    lay, D, Y, X, _ = random_problem(rng)
    hp = Hyperparameters(lam=200.0, fast_particular_update=True)
    atoms, _ = update_atoms_class(Y, X, D, lay, 1, hp, class_offsets=[0, 5, 10], normalize=False)
    Yc, Xc = Y[:, :5], X[:, :5]
    ref = D.copy()
    for a in lay.indices(1):
        R = Yc - np.delete(ref, a, axis=1) @ np.delete(Xc, a, axis=0)
        ref[:, a] = R @ Xc[a] / (Xc[a] @ Xc[a])
    np.testing.assert_allclose(atoms, ref, rtol=1e-10)


# --- objective and training ------------------------------------------------

def test_objective_examples(rng):
    lay, D, Y, X, L = random_problem(rng)
    hp = Hyperparameters(beta=0.3, lam=5.0, gamma=2.0)
    J = objective(Y, D, np.zeros_like(X), lay, L, hp)
    assert J.total == pytest.approx(np.sum(Y ** 2), rel=1e-14)
    hp0 = Hyperparameters(beta=0.3, lam=0.0, gamma=0.0)
    X0 = init_codes(Y, D, 0.3)
    want = np.sum((Y - D @ X0) ** 2) + 0.3 * np.sum(X0 ** 2)
    assert objective(Y, D, X0, lay, L, hp0).total == pytest.approx(want, rel=1e-12)
    J = objective(Y, D, X, lay, L, hp)
    dense = np.sum((Y - D @ X) ** 2) + 0.3 * np.sum(X ** 2) + 2.0 * np.trace(X @ L.dense() @ X.T)
    supp = sum(np.sum((np.diag(suppression_selector(lay, c).mask()) @ X[:, 5 * (c - 1):5 * c]) ** 2)
               for c in (1, 2))
    assert J.total == pytest.approx(dense + 5.0 * supp, rel=1e-12)
    assert J.as_dict()["total"] == J.total


def test_objective_perfect_single_class(rng):
    lay = build_layout(1, 3)
    D = unit_columns(rng, 6, 3)
    X = rng.standard_normal((3, 4))
    L = BlockLaplacian.from_class_sizes([4])
    hp = Hyperparameters(beta=0.2, gamma=1.5)
    J = objective(D @ X, D, X, lay, L, hp)
    assert J.reconstruction == pytest.approx(0.0, abs=1e-20) and J.suppression == 0.0
    assert J.total == pytest.approx(0.2 * np.sum(X ** 2) + 1.5 * np.trace(X @ L.dense() @ X.T))


def test_train_loop_contract(blobs):
    train_set, _ = blobs
    seen = []
    st = train(train_set, build_layout(3, 3, 1), Hyperparameters(max_iters=1), callback=seen.append)
    assert len(st.history) == 2 and st.iterations_run == 1
    assert [r["iteration"] for r in seen] == [0, 1]
    assert set(seen[0]) == {"iteration", "reconstruction", "ridge", "suppression", "group",
                            "total", "wall_ms"}


def test_train_is_deterministic(blobs):
    train_set, _ = blobs
    hp = Hyperparameters(max_iters=5, seed=4)
    a = train(train_set, build_layout(3, 3, 1), hp)
    b = train(train_set, build_layout(3, 3, 1), hp)
    assert len(a.history) == len(b.history)
    assert [h.total for h in a.history] == [h.total for h in b.history]
    np.testing.assert_array_equal(a.dictionary.atoms, b.dictionary.atoms)


def test_train_sequential_history_non_increasing(blobs):
    train_set, _ = blobs
    st = train(train_set, build_layout(3, 5, 2), Hyperparameters(max_iters=30, rel_tol=1e-12))
    totals = [h.total for h in st.history]
    for prev, cur in zip(totals[1:], totals[2:]):
        assert cur <= prev * (1 + 1e-10)


def test_train_large_lambda_concentrates_mass():
    train_set, test_set = make_blobs(7)
    lay = build_layout(3, 3, 1)
    st = train(train_set, lay, Hyperparameters(lam=2e3, gamma=1.0))
    X = np.abs(init_codes(test_set, st.dictionary, 2e-3))
    labels = lay.atom_labels()
    for c in range(1, 4):
        Xc = X[:, test_set.class_slice(c)]
        inside = Xc[(labels == 0) | (labels == c)].mean()
        cross = Xc[(labels != 0) & (labels != c)].mean()
        assert inside > cross


def test_train_with_singleton_classes(rng):
    Y = rng.standard_normal((6, 4))
    ds = LabeledDataset.from_arrays(Y, [1, 2, 3, 3])
    st = train(ds, build_layout(3, 1, 0), Hyperparameters(max_iters=3))
    assert np.all(np.isfinite(st.codes)) and len(st.history) >= 2
