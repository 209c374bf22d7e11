import numpy as np
import pytest
from scipy import optimize

from qelab.aggregators import (
    AllZeroGradients,
    LossHistory,
    NashSolverConfig,
    NoConvergence,
    ZeroGradientTask,
    aggregate_aligned,
    aggregate_dwa,
    aggregate_imtl,
    aggregate_linear,
    aggregate_nash,
    condition_number,
    solve_nash,
)
from qelab.linalg import eigh_sym, gram


def random_gradients(rng, n=None, t=None, scale=False):
    t = t or int(rng.integers(2, 4))
    n = n or int(rng.integers(t + 2, 40))
    g = rng.normal(size=(n, t))
    if scale:
        g = g * np.exp(rng.normal(size=t))
    return g


# ---------------------------------------------------------------- linear


def test_linear_sums_columns():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(10, 2))
    r = aggregate_linear(g)
    assert np.allclose(r.direction, g[:, 0] + g[:, 1], atol=1e-14)
    assert np.array_equal(r.alpha, [1.0, 1.0])


def test_linear_single_task_recovery():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(10, 2))
    r = aggregate_linear(g, w=[1.0, 1e-300])
    assert np.allclose(r.direction, g[:, 0], atol=1e-12)


def test_linear_matches_matvec_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = random_gradients(rng)
        w = rng.uniform(0.5, 2.0, size=g.shape[1])
        r = aggregate_linear(g, w)
        expected = np.array([sum(g[i, j] * w[j] for j in range(g.shape[1]))
                             for i in range(g.shape[0])])
        assert np.abs(r.direction - expected).max() <= 1e-12 * max(1, np.abs(expected).max())


# ---------------------------------------------------------------- nash


def test_nash_identity():
    assert np.allclose(solve_nash(np.eye(2)), [1.0, 1.0], atol=1e-8)


def test_nash_scalar():
    assert np.allclose(solve_nash(np.array([[4.0]])), [0.5], atol=1e-8)


def test_nash_symmetric_2x2():
    a = solve_nash(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(a, [1 / np.sqrt(3)] * 2, atol=1e-8)


def test_nash_random_spd_residual_and_positivity():
    rng = np.random.default_rng(3)
    for _ in range(100):
        m = gram(random_gradients(rng, scale=True))
        a = solve_nash(m)
        assert np.all(a > 0)
        assert np.abs(m @ a - 1.0 / a).max() <= 1e-8


def test_nash_matches_independent_root_finder():
    rng = np.random.default_rng(4)
    for _ in range(25):
        m = gram(random_gradients(rng, t=3))
        a = solve_nash(m)
        # independent oracle: scipy root solve from a coarse grid of inits
        best = None
        for x0 in (np.full(3, 0.1), np.full(3, 1.0), np.full(3, 3.0),
                   1.0 / np.sqrt(np.diag(m))):
            sol = optimize.root(lambda x: m @ x - 1.0 / x, x0, tol=1e-12)
            if sol.success and np.all(sol.x > 0):
                best = sol.x
                break
        assert best is not None
        assert np.allclose(a, best, atol=1e-6)


def test_nash_zero_gradient_task_raises():
    m = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ZeroGradientTask):
        solve_nash(m)


def test_nash_no_convergence_raises():
    m = gram(np.random.default_rng(5).normal(size=(10, 3)))
    with pytest.raises(NoConvergence):
        solve_nash(m, NashSolverConfig(tol=1e-8, max_iter=1))


def test_aggregate_nash_orthonormal():
    g = np.zeros((6, 2))
    g[0, 0] = g[1, 1] = 1.0
    r = aggregate_nash(g)
    assert np.allclose(r.direction, g[:, 0] + g[:, 1], atol=1e-8)
    assert not r.fallback
    assert r.residual <= 1e-8


def test_aggregate_nash_scale_invariance():
    rng = np.random.default_rng(6)
    for _ in range(50):
        g = random_gradients(rng, t=3)
        base = aggregate_nash(g).direction
        col = int(rng.integers(0, 3))
        for c in (0.1, 10.0):
            g2 = g.copy()
            g2[:, col] *= c
            d = aggregate_nash(g2).direction
            assert np.abs(d - base).max() <= 1e-6 * max(1.0, np.abs(base).max())


def test_aggregate_nash_fallback_on_zero_column():
    g = np.zeros((5, 2))
    g[:, 0] = 1.0
    r = aggregate_nash(g)
    assert r.fallback and r.fallback_reason == "zero_gradient_task"
    assert np.array_equal(r.alpha, [1.0, 1.0])
    assert np.allclose(r.direction, g[:, 0])


# ---------------------------------------------------------------- aligned


def test_aligned_identity_gram_returns_importance():
    g = np.zeros((8, 3))
    g[0, 0] = g[1, 1] = g[2, 2] = 1.7
    w = np.array([1.0, 2.0, 0.5])
    r = aggregate_aligned(g, w)
    assert np.abs(r.alpha - w).max() <= 1e-12


def test_aligned_hand_case():
    g = np.zeros((5, 2))
    g[0, 0] = 1.0
    g[1, 1] = 2.0
    r = aggregate_aligned(g)
    assert np.abs(r.alpha - [1.0, 0.5]).max() <= 1e-12
    expected = np.zeros(5)
    expected[0] = expected[1] = 1.0
    assert np.abs(r.direction - expected).max() <= 1e-12


def test_aligned_orthogonality_oracle():
    rng = np.random.default_rng(7)
    for _ in range(25):
        g = rng.normal(size=(40, 3))
        eig = eigh_sym(gram(g))
        lam = eig.eigenvalues
        lam_r = lam[-1]
        b = np.sqrt(lam_r) * (eig.eigenvectors / np.sqrt(lam)) @ eig.eigenvectors.T
        ghat = g @ b
        proj = eig.eigenvectors @ eig.eigenvectors.T
        assert np.abs(ghat.T @ ghat - lam_r * proj).max() <= 1e-6 * lam_r
        assert abs(condition_number(ghat) - 1.0) <= 1e-6
        r = aggregate_aligned(g)
        assert np.allclose(r.alpha, b @ np.ones(3), atol=1e-10)
        assert abs(r.condition_number - 1.0) <= 1e-6


def test_aligned_rank_deficient_columns():
    rng = np.random.default_rng(8)
    g1 = rng.normal(size=12)
    g = np.stack([g1, g1], axis=1)
    r = aggregate_aligned(g)
    assert np.all(np.isfinite(r.alpha))
    assert np.all(np.isfinite(r.direction))
    assert abs(r.condition_number - 1.0) <= 1e-6


def test_aligned_all_zero_raises():
    with pytest.raises(AllZeroGradients):
        aggregate_aligned(np.zeros((4, 2)))


# ---------------------------------------------------------------- dwa


def test_dwa_first_epochs_all_ones():
    g = np.random.default_rng(9).normal(size=(6, 2))
    for hist in (LossHistory.empty(2), LossHistory.empty(2).with_epoch([1.0, 2.0])):
        r = aggregate_dwa(g, hist)
        assert np.array_equal(r.alpha, [1.0, 1.0])


def test_dwa_equal_ratios_all_ones():
    g = np.random.default_rng(10).normal(size=(6, 3))
    hist = LossHistory.empty(3).with_epoch([2.0, 4.0, 8.0]).with_epoch([1.0, 2.0, 4.0])
    r = aggregate_dwa(g, hist)
    assert np.abs(r.alpha - 1.0).max() <= 1e-12


def test_dwa_hand_computed_softmax():
    g = np.random.default_rng(11).normal(size=(6, 2))
    hist = LossHistory.empty(2).with_epoch([1.0, 2.0]).with_epoch([1.0, 1.0])
    r = aggregate_dwa(g, hist, temperature=2.0)
    z = np.exp([0.5, 0.25])
    expected = 2.0 * z / z.sum()
    assert np.abs(r.alpha - expected).max() <= 1e-12
    assert abs(r.alpha.sum() - 2.0) <= 1e-12


def test_dwa_weights_sum_to_task_count():
    rng = np.random.default_rng(12)
    for _ in range(20):
        t = int(rng.integers(2, 5))
        g = rng.normal(size=(8, t))
        hist = LossHistory.empty(t).with_epoch(rng.uniform(0.5, 2, t)).with_epoch(
            rng.uniform(0.5, 2, t))
        r = aggregate_dwa(g, hist)
        assert abs(r.alpha.sum() - t) <= 1e-12


def test_dwa_zero_loss_fallback():
    g = np.random.default_rng(13).normal(size=(6, 2))
    hist = LossHistory.empty(2).with_epoch([0.0, 1.0]).with_epoch([1.0, 1.0])
    r = aggregate_dwa(g, hist)
    assert r.fallback and r.fallback_reason == "zero_loss"
    assert np.array_equal(r.alpha, [1.0, 1.0])


def test_loss_history_validation():
    with pytest.raises(ValueError):
        LossHistory.empty(2).with_epoch([1.0])
    with pytest.raises(ValueError):
        LossHistory((tuple([1.0]), ())).epochs_completed


# ---------------------------------------------------------------- imtl


def test_imtl_equal_norm_pair():
    rng = np.random.default_rng(14)
    g1 = rng.normal(size=10)
    g1 /= np.linalg.norm(g1)
    g2 = rng.normal(size=10)
    g2 /= np.linalg.norm(g2)
    r = aggregate_imtl(np.stack([g1, g2], axis=1))
    assert np.abs(r.alpha - 0.5).max() <= 1e-10


def test_imtl_orthogonal_unequal_norms():
    g = np.zeros((6, 2))
    g[0, 0] = 1.0
    g[1, 1] = 2.0
    r = aggregate_imtl(g)
    assert np.abs(r.alpha - [2 / 3, 1 / 3]).max() <= 1e-12
    for i in range(2):
        u = g[:, i] / np.linalg.norm(g[:, i])
        assert abs(r.direction @ u - 2 / 3) <= 1e-12


def test_imtl_equal_projections_random():
    rng = np.random.default_rng(15)
    for _ in range(50):
        g = random_gradients(rng, t=3, scale=True)
        r = aggregate_imtl(g)
        assert abs(r.alpha.sum() - 1.0) <= 1e-12
        projs = [r.direction @ (g[:, i] / np.linalg.norm(g[:, i])) for i in range(3)]
        assert max(projs) - min(projs) <= 1e-8 * max(1.0, abs(projs[0]))


def test_imtl_degenerate_falls_back():
    g1 = np.random.default_rng(16).normal(size=9)
    r = aggregate_imtl(np.stack([g1, g1], axis=1))
    assert r.fallback and r.fallback_reason == "degenerate_system"
    ratio = r.direction / (2 * g1)
    assert np.allclose(ratio, 1.0, atol=1e-12)


def test_imtl_zero_column_falls_back():
    g = np.zeros((5, 2))
    g[:, 0] = 2.0
    r = aggregate_imtl(g)
    assert r.fallback and r.fallback_reason == "zero_gradient_task"


# ------------------------------------------------------ condition number


def test_condition_number_orthonormal():
    assert abs(condition_number(np.eye(4)[:, :2]) - 1.0) <= 1e-12


def test_condition_number_axis_scaled():
    g = np.zeros((5, 2))
    g[0, 0] = 1.0
    g[1, 1] = 2.0
    assert abs(condition_number(g) - 2.0) <= 1e-12


def test_condition_number_all_zero_raises():
    with pytest.raises(AllZeroGradients):
        condition_number(np.zeros((4, 2)))


# --------------------------------------------------- shared properties


AGGREGATOR_CALLS = {
    "linear": lambda g, w, hist: aggregate_linear(g, w),
    "nash": lambda g, w, hist: aggregate_nash(g),
    "aligned": lambda g, w, hist: aggregate_aligned(g, w),
    "dwa": lambda g, w, hist: aggregate_dwa(g, hist),
    "imtl": lambda g, w, hist: aggregate_imtl(g),
}


@pytest.mark.parametrize("kind", sorted(AGGREGATOR_CALLS))
def test_task_permutation_equivariance(kind):
    rng = np.random.default_rng(17)
    call = AGGREGATOR_CALLS[kind]
    for _ in range(10):
        g = random_gradients(rng, t=3)
        w = rng.uniform(0.5, 2.0, size=3)
        hist = LossHistory.empty(3).with_epoch(rng.uniform(0.5, 2, 3)).with_epoch(
            rng.uniform(0.5, 2, 3))
        perm = rng.permutation(3)
        hist_p = LossHistory(tuple(hist.per_task[j] for j in perm))
        r = call(g, w, hist)
        rp = call(g[:, perm], w[perm], hist_p)
        scale = max(1.0, np.abs(r.direction).max())
        assert np.abs(rp.direction - r.direction).max() <= 1e-6 * scale
        assert np.abs(rp.alpha - r.alpha[perm]).max() <= 1e-6 * max(1.0, np.abs(r.alpha).max())


def test_single_task_degeneration_duplicated_column():
    rng = np.random.default_rng(18)
    g1 = rng.normal(size=20)
    g = np.stack([g1, g1], axis=1)
    for kind in ("linear", "nash", "imtl"):
        r = AGGREGATOR_CALLS[kind](g, None if kind != "linear" else np.ones(2),
                                   LossHistory.empty(2))
        coef = r.direction @ g1 / (g1 @ g1)
        assert coef > 0
        assert np.abs(r.direction - coef * g1).max() <= 1e-9 * max(1.0, np.abs(r.direction).max())
