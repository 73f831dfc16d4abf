import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import mmread

from mmeloc.errors import NonFiniteJacobian, RankDeficient, SingularR
from mmeloc.isolver import (IncrementalSolver, LinearFactor, LinearSystem, RelinState, SqrtInfo, backsubstitute,
                            dump_matrix_market, incremental_update, incremental_update_factors, linearize,
                            min_degree_order, qr_factorize, solution_dict, solve_adaptive)
from mmeloc.gajo import PriorFactor


def frob_rel(R, A):
    M = A.T @ A
    return np.linalg.norm(R.T @ R - M) / max(np.linalg.norm(M), 1e-300)


def permuted(A, sq):
    """Columns of A in the factor's column order."""
    return A[:, np.concatenate([np.arange(k, k + 1) for k in sq.perm_vars])]


def chain(n, rng, dim=3):
    """Odometry chain with a handful of absolute fixes."""
    fs = [LinearFactor([0], [np.eye(dim)], rng.normal(size=dim), 0.1)]
    for i in range(1, n):
        fs.append(LinearFactor([i - 1, i], [-np.eye(dim), np.eye(dim)], rng.normal(size=dim), 0.2))
        if i % 7 == 0:
            fs.append(LinearFactor([i], [rng.normal(size=(2, dim))], rng.normal(size=2), 0.5))
    return fs


def batch_solution(fs, values):
    sq = qr_factorize(linearize(fs, values))
    return solution_dict(sq)


# ----------------------------------------------------------------------------
# linearize


def test_prior_jacobian_identity():
    v = {0: np.zeros(3), 1: np.ones(3), 2: np.full(3, 3.0)}
    sys = linearize([PriorFactor(2, 1.0)], v)
    assert np.allclose(sys.dense, np.hstack([np.eye(3), -2 * np.eye(3), np.eye(3)]))
    assert np.allclose(sys.b, -(v[2] - 2 * v[1] + v[0]))


def test_linearize_drops_fixed_columns():
    v = {0: np.zeros(3), 1: np.ones(3), 2: np.full(3, 3.0)}
    sys = linearize([PriorFactor(2, 1.0)], v, fixed={0, 1})
    assert sys.variables == [2] and sys.shape == (3, 3)


class _Bad:
    keys = (0,)
    dim = 1

    def whitened(self, v):
        return np.array([np.nan]), [np.ones((1, 3))]


def test_linearize_non_finite():
    with pytest.raises(NonFiniteJacobian):
        linearize([_Bad()], {0: np.zeros(3)})


# ----------------------------------------------------------------------------
# QR


def test_qr_identity():
    sq = qr_factorize(LinearSystem.from_dense(np.eye(3), [1, 2, 3]))
    assert np.allclose(sq.R, np.eye(3)) and np.allclose(sq.d, [1, 2, 3])


def test_qr_random_full_rank(rng):
    A = rng.normal(size=(20, 6))
    b = rng.normal(size=20)
    sq = qr_factorize(LinearSystem.from_dense(A, b))
    Ap = permuted(A, sq)
    assert frob_rel(sq.R, Ap) <= 1e-9
    assert np.allclose(sq.R, np.triu(sq.R))
    # d is the leading block of Q^T b: R^T d = A^T b
    assert np.allclose(sq.R.T @ sq.d, Ap.T @ b)
    x = backsubstitute(sq, list(range(6)))
    assert np.allclose(x, np.linalg.solve(A.T @ A, A.T @ b), atol=1e-8)


def test_qr_duplicate_column_rank_deficient(rng):
    A = rng.normal(size=(12, 6))
    A[:, 5] = A[:, 2]
    with pytest.raises(RankDeficient) as ei:
        qr_factorize(LinearSystem.from_dense(A, np.zeros(12)))
    assert ei.value.variable == 5


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**32 - 1), st.floats(0.2, 0.9))
def test_qr_gram_invariant(n, seed, density):
    rng = np.random.default_rng(seed)
    m = n + 6
    A = rng.normal(size=(m, n)) * (rng.random((m, n)) < density)
    A[np.arange(n), np.arange(n)] += 3.0  # keep it full column rank
    sq = qr_factorize(LinearSystem.from_dense(A, rng.normal(size=m)))
    assert frob_rel(sq.R, permuted(A, sq)) <= 1e-9


# ----------------------------------------------------------------------------
# back-substitution


def test_backsub_identity():
    v = np.array([3.0, -1.0, 2.0])
    sq = SqrtInfo(np.eye(3), v, [0, 1, 2], {0: 1, 1: 1, 2: 1})
    assert np.array_equal(backsubstitute(sq), v)


def test_backsub_singular():
    R = np.triu(np.ones((3, 3)))
    R[1, 1] = 0.0
    with pytest.raises(SingularR):
        backsubstitute(SqrtInfo(R, np.ones(3), [0, 1, 2], {0: 1, 1: 1, 2: 1}))


# ----------------------------------------------------------------------------
# incremental update


def test_incremental_touching_last_variable(rng):
    fs = chain(10, rng)
    v = {i: np.zeros(3) for i in range(10)}
    sq = qr_factorize(linearize(fs, v))
    last = sq.perm_vars[-1]
    R0 = sq.R.copy()
    new = LinearFactor([last], [rng.normal(size=(3, 3))], rng.normal(size=3), 0.3)
    incremental_update_factors(sq, [new], v)
    lead = sq.pos[last]
    assert np.array_equal(sq.R[:lead], R0[:lead])
    # same ordering, fresh factorization
    sys = linearize(fs + [new], v)
    order = [sys.variables.index(k) for k in sq.perm_vars]
    full = qr_factorize(sys, order)
    assert np.allclose(sq.R, full.R, atol=1e-9) and np.allclose(sq.d, full.d, atol=1e-9)


def test_incremental_zero_information(rng):
    fs = chain(6, rng)
    v = {i: np.zeros(3) for i in range(6)}
    sq = qr_factorize(linearize(fs, v))
    R0, d0 = sq.R.copy(), sq.d.copy()
    incremental_update_factors(sq, [LinearFactor([2, 4], [np.eye(3), np.eye(3)], np.ones(3), np.inf)], v)
    assert np.allclose(sq.R, R0, atol=1e-12) and np.allclose(sq.d, d0, atol=1e-12)


def test_fifty_incremental_adds_match_batch(rng):
    fs = chain(60, rng)
    v = {i: np.zeros(3) for i in range(60)}
    head = [f for f in fs if max(f.keys) < 10]
    tail = [f for f in fs if max(f.keys) >= 10][:50]
    sq = qr_factorize(linearize(head, v))
    for f in tail:
        incremental_update_factors(sq, [f], v)
    inc = solution_dict(sq)
    ref = batch_solution(head + tail, v)
    assert set(inc) == set(ref)
    for k in ref:
        assert np.abs(inc[k] - ref[k]).max() <= 1e-6
    # Gram invariant still holds in the incremental column order
    sys = linearize(head + tail, v)
    offs = dict(zip(sys.variables, np.cumsum([0] + sys.sizes[:-1])))
    cols = np.concatenate([np.arange(offs[k], offs[k] + 3) for k in sq.perm_vars])
    assert frob_rel(sq.R, sys.dense[:, cols]) <= 1e-9


def test_incremental_rejects_non_finite():
    sq = SqrtInfo(np.eye(3), np.zeros(3), [0], {0: 3})
    with pytest.raises(NonFiniteJacobian):
        incremental_update(sq, np.full((1, 3), np.nan), [0.0], [0], [3])


# ----------------------------------------------------------------------------
# adaptive relinearization


def test_relin_state_validation():
    with pytest.raises(ValueError):
        RelinState(delta=0.0)
    with pytest.raises(ValueError):
        RelinState(L_T=0)


def test_tiny_update_skips_full_update(rng):
    fs = chain(8, rng)
    # start at the solution so the next update barely moves anything
    v = batch_solution(fs, {i: np.zeros(3) for i in range(8)})
    sol = IncrementalSolver(RelinState(), {})
    sol.update(fs, v)
    n0 = sol.stats.full_updates
    small = LinearFactor([7], [np.eye(3)], v[7] + 1e-5, 1.0)
    assert sol.update([small]) is False
    assert sol.stats.full_updates == n0 and sol.stats.incremental_updates == 1


def test_single_jump_triggers_full_update(rng):
    fs = chain(8, rng)
    v = batch_solution(fs, {i: np.zeros(3) for i in range(8)})
    sol = IncrementalSolver(RelinState(delta=0.01, L_T=1, Delta=10.0), {})
    sol.update(fs, v)
    n0 = sol.stats.full_updates
    target = v[3] + np.array([0.1, 0.0, 0.0])  # pulls node 3 by about 10 delta
    assert sol.update([LinearFactor([3], [np.eye(3)], target, 1e-4)]) is True
    assert sol.stats.full_updates == n0 + 1 and sol.stats.relinearizations == 1
    # right after the FullUpdate the estimate is the batch step from the new linearization points
    ref = batch_solution(sol.factors, sol.lin)
    for k in ref:
        assert np.allclose(sol.estimate[k], sol.lin[k] + ref[k], atol=1e-9)


def test_solve_adaptive_returns_estimates(rng):
    fs = chain(5, rng)
    sol = IncrementalSolver()
    est = solve_adaptive(sol, fs, {i: np.zeros(3) for i in range(5)})
    ref = batch_solution(fs, {i: np.zeros(3) for i in range(5)})
    for k in ref:
        assert np.allclose(est[k], ref[k], atol=1e-9)


def test_incremental_within_tolerance_over_200_additions(rng):
    fs = chain(210, rng)
    v = {i: np.zeros(3) for i in range(210)}
    first = [f for f in fs if max(f.keys) < 5]
    rest = [f for f in fs if max(f.keys) >= 5][:200]
    sol = IncrementalSolver(RelinState(delta=1e9, L_T=10**6, Delta=1e9), {})
    sol.update(first, {k: v[k] for k in range(5)})
    for f in rest:
        sol.update([f], {k: v[k] for k in f.keys if k not in sol.lin})
    assert sol.stats.full_updates == 1
    ref = batch_solution(sol.factors, sol.lin)
    assert max(np.abs(sol.estimate[k] - ref[k]).max() for k in ref) <= 1e-6


# ----------------------------------------------------------------------------
# ordering and dumps


def min_degree_reference(n, cliques):
    adj = [set() for _ in range(n)]
    for c in cliques:
        for i in c:
            adj[i].update(set(c) - {i})
    left, order = set(range(n)), []
    while left:
        v = min(left, key=lambda i: (len(adj[i]), i))
        for a in adj[v]:
            adj[a].discard(v)
            adj[a].update(adj[v] - {a})
        left.remove(v)
        order.append(v)
    return order


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 14).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.lists(st.integers(0, n - 1), min_size=1, max_size=3), max_size=20))))
def test_min_degree_matches_reference(problem):
    n, cliques = problem
    order = min_degree_order(n, cliques)
    assert sorted(order) == list(range(n))
    assert order == min_degree_reference(n, cliques)


def test_min_degree_star_leaves_first():
    # leaves go first; once one leaf is left it ties with the hub at degree 1
    cliques = [[0, i] for i in range(1, 6)]
    assert min_degree_order(6, cliques) == [1, 2, 3, 4, 0, 5]


def test_matrix_market_dump(tmp_path, rng):
    fs = chain(5, rng)
    sys = linearize(fs, {i: np.zeros(3) for i in range(5)})
    sq = qr_factorize(sys)
    paths = dump_matrix_market(tmp_path / "chk", sys, sq)
    assert len(paths) == 2
    assert np.allclose(mmread(paths[0]).toarray(), sys.dense)
    assert np.allclose(mmread(paths[1]).toarray(), sq.R)
