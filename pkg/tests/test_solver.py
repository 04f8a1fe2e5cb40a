import numpy as np
import pytest
import scipy.sparse as sp

from disdca import (
    Dataset,
    IncrementProblem,
    SolverConfig,
    binarize_labels,
    dual_increment,
    generate_synthetic,
    orthogonality_residual,
    partition,
    run_disdca,
    run_one_communication,
    run_sdca_reference,
)
from disdca.diagnostics import dual_objective, primal_objective
from disdca.errors import ConfigError, NotConvergedError, UnsupportedModeError
from disdca.solver import draw_picks

import oracles


@pytest.fixture(scope="module")
def small():
    ds = binarize_labels(generate_synthetic(4, 3, 30, seed=5))
    return ds


@pytest.fixture(scope="module")
def small_reg():
    return generate_synthetic(4, 3, 30, seed=5)


def _cfg(**kw):
    base = dict(variant="practical", K=3, m=5, T=6, lam=1e-2, loss="squared_hinge", seed=0)
    base.update(kw)
    return SolverConfig(**base)


def _ortho_kw(ds, p):
    return dict(orthogonality_residual=orthogonality_residual(ds, p))


def test_scale_is_derived():
    assert _cfg(variant="naive", K=4, m=7).scale == 28
    assert _cfg(K=4).scale == 4
    assert _cfg(variant="orthogonal", K=1).scale == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(variant="fast")
    with pytest.raises(ConfigError):
        _cfg(K=0)
    with pytest.raises(ConfigError):
        _cfg(lam=0.0)
    with pytest.raises(ConfigError):
        _cfg(sampling="stratified")
    with pytest.raises(ConfigError):
        _cfg(variant="orthogonal", K=2)
    with pytest.raises(ConfigError):
        _cfg(variant="orthogonal", K=2, orthogonality_residual=1e-3)
    _cfg(variant="orthogonal", K=2, orthogonality_residual=0.0)


def test_zero_rounds(small):
    res = run_disdca(_cfg(T=0), small, partition(small, 3))
    assert not res.w.any() and not res.alpha.any()
    assert len(res.trace) == 1 and res.trace[0].t == 0


def test_partition_mismatch(small):
    with pytest.raises(ConfigError):
        run_disdca(_cfg(K=2), small, partition(small, 3))


def test_classification_needs_sign_labels(small_reg):
    with pytest.raises(ConfigError):
        run_disdca(_cfg(), small_reg, partition(small_reg, 3))


@pytest.mark.parametrize("loss", ["squared_hinge", "logistic", "least_squares"])
def test_single_machine_is_plain_sdca(small, small_reg, loss):
    ds = small_reg if loss == "least_squares" else small
    T, lam = 40, 1e-2
    res = run_disdca(_cfg(K=1, m=1, T=T, lam=lam, loss=loss, seed=3), ds, partition(ds, 1))
    rng = np.random.default_rng(3)
    picks = np.concatenate([rng.integers(0, ds.n, size=1) for _ in range(T)])

    def inc(alpha, margin, xx, y):
        return dual_increment(loss, IncrementProblem(alpha, margin, xx, 1.0, lam, ds.n, y))

    w, alpha = oracles.plain_sdca(ds, lam, inc, picks)
    assert np.allclose(res.alpha, alpha, atol=1e-13, rtol=0)
    assert np.allclose(res.w, w, atol=1e-12, rtol=0)


def test_naive_first_round_uses_fixed_model(small_reg):
    ds, lam, m, K = small_reg, 0.05, 4, 3
    p = partition(ds, K)
    res = run_disdca(_cfg(variant="naive", K=K, m=m, T=1, lam=lam, loss="least_squares", seed=9), ds, p)
    for k in range(K):
        rng = np.random.default_rng(9 + k)
        picks = p.shards[k][rng.integers(0, len(p.shards[k]), size=m)]
        alpha = {}
        for i in picks:
            a = alpha.get(i, 0.0)
            xx = ds.row_norms_sq[i]
            alpha[i] = a + dual_increment("least_squares", IncrementProblem(a, 0.0, xx, m * K, lam, ds.n, ds.y[i]))
        for i, a in alpha.items():
            assert res.alpha[i] == pytest.approx(a, abs=1e-15)


@pytest.mark.parametrize("variant", ["naive", "practical", "orthogonal"])
@pytest.mark.parametrize("loss", ["squared_hinge", "logistic", "least_squares"])
def test_ascent_weak_duality_and_consistency(small, small_reg, variant, loss):
    ds = small_reg if loss == "least_squares" else small
    p = partition(ds, 4)
    kw = _ortho_kw(ds, p) if variant == "orthogonal" else {}
    cfg = _cfg(variant=variant, K=4, m=15, T=12, loss=loss, seed=2, **kw)
    res = run_disdca(cfg, ds, p)
    duals = [r.dual_obj for r in res.trace]
    assert all(b >= a - 1e-12 for a, b in zip(duals, duals[1:]))
    assert all(r.gap >= -1e-10 for r in res.trace)
    w_from_alpha = ds.X.T @ res.alpha / (cfg.lam * ds.n)
    assert np.max(np.abs(res.w - w_from_alpha)) <= 1e-12
    assert res.trace[-1].dual_obj == pytest.approx(dual_objective(ds, res.alpha, loss, cfg.lam), abs=1e-12)
    assert res.trace[-1].primal_obj == pytest.approx(primal_objective(ds, res.w, loss, cfg.lam), abs=1e-12)
    assert res.trace[-1].primal_obj == pytest.approx(oracles.naive_primal(ds, res.w, loss, cfg.lam), abs=1e-12)


def test_orthogonal_local_margin_equals_global_margin():
    """Replays the orthogonal variant step by step and checks x.u_k against x.w."""
    ds = binarize_labels(generate_synthetic(3, 4, 20, seed=6))
    K, m, T, lam = 3, 8, 5, 1e-2
    p = partition(ds, K)
    cfg = _cfg(variant="orthogonal", K=K, m=m, T=T, lam=lam, seed=4, **_ortho_kw(ds, p))
    res = run_disdca(cfg, ds, p)

    X = ds.X.toarray()
    n = ds.n
    alpha = np.zeros(n)
    w = np.zeros(ds.dim)
    rngs = [np.random.default_rng(4 + k) for k in range(K)]
    worst = 0.0
    for _ in range(T):
        picks = [p.shards[k][rngs[k].integers(0, len(p.shards[k]), size=m)] for k in range(K)]
        us = [w.copy() for _ in range(K)]
        w_live = w.copy()
        for j in range(m):
            for k in range(K):
                i = picks[k][j]
                worst = max(worst, abs(X[i] @ us[k] - X[i] @ w_live))
                delta = dual_increment(
                    "squared_hinge", IncrementProblem(alpha[i], X[i] @ us[k], X[i] @ X[i], 1.0, lam, n, ds.y[i])
                )
                alpha[i] += delta
                us[k] += delta * X[i] / (lam * n)
                w_live += delta * X[i] / (lam * n)
        w = X.T @ alpha / (lam * n)
    assert worst <= 1e-12
    assert np.allclose(res.alpha, alpha, atol=1e-12, rtol=0)


def test_practical_reduce_of_identical_models():
    # one shared example per worker: all w_k coincide, the average is that model
    X = sp.csr_matrix(np.array([[0.6], [0.6]]))
    ds = Dataset(X, np.array([1.0, 1.0]))
    res = run_disdca(_cfg(K=2, m=1, T=3), ds, partition(ds, 2))
    assert res.alpha[0] == res.alpha[1]
    assert res.w[0] == pytest.approx(0.6 * res.alpha.sum() / (1e-2 * 2), abs=1e-14)


@pytest.mark.parametrize("variant", ["naive", "practical"])
def test_threads_match_single_thread(small, variant):
    p = partition(small, 3, "random", seed=1)
    cfg = _cfg(variant=variant, T=8, m=7)
    a = run_disdca(cfg, small, p)
    b = run_disdca(cfg, small, p, comm="threads")
    assert [r.row() for r in a.trace] == [r.row() for r in b.trace]
    assert np.array_equal(a.w, b.w) and np.array_equal(a.alpha, b.alpha)


def test_threads_reject_lockstep(small):
    with pytest.raises(UnsupportedModeError):
        run_disdca(_cfg(), small, partition(small, 3), comm="threads", lockstep=True)


def test_unknown_comm(small):
    with pytest.raises(ConfigError):
        run_disdca(_cfg(), small, partition(small, 3), comm="mpi")


def test_determinism(small):
    p = partition(small, 3)
    cfg = _cfg(T=10, sampling="without_replacement_per_round")
    a, b = run_disdca(cfg, small, p), run_disdca(cfg, small, p)
    assert [r.row() for r in a.trace] == [r.row() for r in b.trace]


def test_lockstep_iterates_match_sequential(small):
    p = partition(small, 3)
    cfg = _cfg(T=5, m=9)
    a = run_disdca(cfg, small, p)
    b = run_disdca(cfg, small, p, lockstep=True)
    # the practical variant's workers only read their own u, so order does not matter
    assert np.array_equal(a.alpha, b.alpha)
    assert all(r.S is not None for r in b.trace[1:])
    assert len(b.inner) == 5 and b.inner[0].R.shape == (9,)


def test_inner_records(small):
    p = partition(small, 3)
    res = run_disdca(_cfg(T=2, m=4), small, p, inner_records=True)
    js = [(r.t, r.j) for r in res.trace]
    assert (1, 1) in js and (1, -1) in js and (2, 3) in js


def test_without_replacement_covers_shard():
    rng = np.random.default_rng(0)
    picks = draw_picks(rng, 5, 12, "without_replacement_per_round")
    assert sorted(picks[:5].tolist()) == list(range(5))
    assert sorted(picks[5:10].tolist()) == list(range(5))
    assert len(picks) == 12


def test_reference_two_point_kkt():
    X = sp.csr_matrix(np.array([[1.0], [1.0]]))
    ds = Dataset(X, np.array([1.0, 1.0]))
    ref = run_sdca_reference(ds, 1.0, "least_squares", gap_tol=1e-14)
    assert ref.w[0] == pytest.approx(0.5, abs=1e-7)
    assert np.allclose(ref.alpha, 0.5, atol=1e-7)
    assert ref.gap <= 1e-14


def test_reference_gap_and_determinism(small):
    a = run_sdca_reference(small, 1e-2, "logistic", gap_tol=1e-10)
    b = run_sdca_reference(small, 1e-2, "logistic", gap_tol=1e-10)
    assert a.gap <= 1e-10
    assert np.array_equal(a.w, b.w) and a.rounds == b.rounds
    assert a.primal - a.dual == pytest.approx(a.gap)


def test_reference_not_converged(small):
    with pytest.raises(NotConvergedError, match="reference not converged"):
        run_sdca_reference(small, 1e-4, gap_tol=1e-14, max_epochs=2)


def test_one_communication_block_vs_random(ortho_instance, ortho_reference):
    ds, p_block, residual = ortho_instance
    block = run_one_communication(
        SolverConfig(variant="orthogonal", K=5, m=1, T=1, lam=1e-3, orthogonality_residual=residual,
                     local_gap_tol=1e-6),
        ds, p_block, reference=ortho_reference,
    )
    assert block.locally_converged
    assert block.trace[-1].gap <= 10 * 1e-6
    p_rand = partition(ds, 5, "random", seed=0)
    rand = run_one_communication(
        SolverConfig(variant="practical", K=5, m=1, T=1, lam=1e-3, local_gap_tol=1e-6), ds, p_rand,
        reference=ortho_reference,
    )
    assert rand.trace[-1].gap > block.trace[-1].gap
    assert rand.trace[-1].dist_to_opt > block.trace[-1].dist_to_opt


def test_one_communication_single_worker_is_sdca(small):
    ref = run_sdca_reference(small, 1e-2, gap_tol=1e-9)
    res = run_one_communication(_cfg(K=1, local_gap_tol=1e-9), small, partition(small, 1))
    assert res.trace[-1].gap <= 1e-9
    assert np.linalg.norm(res.w - ref.w) <= 1e-3


def test_one_communication_round_cap_flagged(small):
    res = run_one_communication(_cfg(local_gap_tol=1e-15, max_local_epochs=2), small, partition(small, 3))
    assert not res.locally_converged
    assert len(res.local_gaps) == 3


def test_one_communication_rejects_naive(small):
    with pytest.raises(ConfigError):
        run_one_communication(_cfg(variant="naive"), small, partition(small, 3))
