"""Loss-combination heuristics over per-task gradient matrices.

Each aggregator maps a gradient matrix G (one column per task, one row
per shared parameter) plus auxiliary state to positive-ish task weights
``alpha`` and a single combined update direction ``G @ alpha``:

- linear: fixed importance weights.
- nash:   bargaining weights solving  G^T G alpha = 1 / alpha.
- aligned: principal components of G rescaled so every retained
  singular value equals the smallest, driving the condition number of
  the gradient system to 1.
- dwa:    epoch-level softmax over loss-descent ratios.
- imtl:   weights giving the combined step equal projections onto every
  unit task gradient.

Degenerate inputs (zero-gradient tasks, non-converged solves, singular
balancing systems) never raise out of ``aggregate_*``: the result falls
back to linear weights and carries a fallback flag so a training loop
can log and continue.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import eigh_sym, gram

ZERO_DIAG_TOL = 1e-18  # on squared column norms (Gram diagonal)
ZERO_NORM_TOL = 1e-18  # on column norms
DEFAULT_RANK_TOL = 1e-10


class ZeroGradientTask(ValueError):
    """A task contributes a (numerically) zero gradient column."""


class NoConvergence(RuntimeError):
    """The bargaining solve did not reach the residual tolerance."""


class AllZeroGradients(ValueError):
    """Every task gradient is numerically zero."""


class DegenerateSystem(ValueError):
    """The balancing linear system is singular."""


class ZeroLoss(ValueError):
    """A recorded epoch loss is too small for ratio-based weighting."""


@dataclass(frozen=True)
class NashSolverConfig:
    tol: float = 1e-8
    max_iter: int = 200
    damping: float = 0.5

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")


@dataclass(frozen=True)
class LossHistory:
    """Mean epoch losses per task; ``per_task[i][e]`` is task i, epoch e."""

    per_task: tuple[tuple[float, ...], ...]

    @staticmethod
    def empty(n_tasks: int) -> "LossHistory":
        return LossHistory(tuple(() for _ in range(n_tasks)))

    def with_epoch(self, losses) -> "LossHistory":
        if len(losses) != len(self.per_task):
            raise ValueError("epoch loss count does not match task count")
        return LossHistory(
            tuple(hist + (float(l),) for hist, l in zip(self.per_task, losses))
        )

    @property
    def epochs_completed(self) -> int:
        lengths = {len(h) for h in self.per_task}
        if len(lengths) > 1:
            raise ValueError("task histories have unequal lengths")
        return lengths.pop() if lengths else 0


@dataclass
class AggregationResult:
    """Combined update direction plus per-task weights and diagnostics.

    ``direction`` is G @ alpha, the unscaled negative update direction
    for the shared parameters. ``condition_number`` describes the
    gradient system the update actually uses (the aligned system for the
    aligned aggregator, the raw one otherwise); it is None when every
    column is zero. ``residual`` is the bargaining residual
    ``max |M alpha - 1/alpha|`` and is set only by the nash aggregator.
    """

    direction: np.ndarray
    alpha: np.ndarray
    residual: float | None = None
    condition_number: float | None = None
    fallback: bool = False
    fallback_reason: str | None = None
    extras: dict = field(default_factory=dict)


def _as_gradient_matrix(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"gradient matrix must be 2-d, got shape {g.shape}")
    if np.any(np.all(np.isnan(g), axis=0)):
        raise ValueError("gradient matrix has an all-NaN column")
    return g


def _ones_importance(n_tasks: int, w) -> np.ndarray:
    if w is None:
        return np.ones(n_tasks)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n_tasks,):
        raise ValueError(f"importance vector has shape {w.shape}, expected ({n_tasks},)")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("importance weights must be positive and finite")
    return w


def _retained_count(lam: np.ndarray, rank_tol: float) -> int:
    return int(np.sum(lam > rank_tol * lam[0]))


def _condition_from_eigs(lam: np.ndarray, rank_tol: float) -> float:
    r = _retained_count(lam, rank_tol)
    return float(np.sqrt(lam[0] / lam[r - 1]))


def _raw_condition(m: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> float | None:
    if np.all(np.diag(m) <= ZERO_NORM_TOL**2):
        return None
    return _condition_from_eigs(eigh_sym(m).eigenvalues, rank_tol)


def solve_nash(m, cfg: NashSolverConfig = NashSolverConfig()) -> np.ndarray:
    """Solve the bargaining condition  M alpha = 1 / alpha  for alpha > 0.

    Primary path is the damped fixed-point iteration
    ``alpha <- (1 - damping) * alpha + damping / (M alpha)`` from
    ``alpha_i = 1 / sqrt(T * M_ii)``. When an iterate leaves the positive
    orthant or the budget for the fixed point is spent, the solve
    switches to a Newton iteration on ``F(alpha) = M alpha - 1/alpha``
    with backtracking on the residual norm. F is the gradient of the
    strictly convex potential ``alpha^T M alpha / 2 - sum(log alpha)``,
    so the residual norm has no spurious minima and the combined scheme
    converges for positive definite M.

    Raises :class:`ZeroGradientTask` when a Gram diagonal entry is
    (numerically) zero and :class:`NoConvergence` when the residual
    tolerance is not met within ``cfg.max_iter`` total iterations.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    diag = np.diag(m)
    if np.any(diag <= ZERO_DIAG_TOL):
        raise ZeroGradientTask("Gram diagonal has a zero entry (zero task gradient)")

    alpha = 1.0 / np.sqrt(n * diag)

    def residual(a: np.ndarray) -> float:
        return float(np.max(np.abs(m @ a - 1.0 / a)))

    it = 0
    fp_budget = min(cfg.max_iter, 60)
    while it < fp_budget:
        ma = m @ alpha
        if np.max(np.abs(ma - 1.0 / alpha)) <= cfg.tol:
            return alpha
        cand = (1.0 - cfg.damping) * alpha + cfg.damping / ma
        if np.any(ma <= 0.0) or np.any(cand <= 0.0) or not np.all(np.isfinite(cand)):
            break
        alpha = cand
        it += 1

    best = residual(alpha)
    while it < cfg.max_iter:
        if best <= cfg.tol:
            return alpha
        grad = m @ alpha - 1.0 / alpha
        hess = m + np.diag(1.0 / alpha**2)
        step = np.linalg.solve(hess, -grad)
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = alpha + t * step
            if np.all(cand > 0.0):
                r = residual(cand)
                if r < best:
                    alpha, best, accepted = cand, r, True
                    break
            t *= 0.5
        if not accepted:
            raise NoConvergence(f"residual stalled at {best:.3e} after {it} iterations")
        it += 1
    if best <= cfg.tol:
        return alpha
    raise NoConvergence(f"residual {best:.3e} after {cfg.max_iter} iterations")


def aggregate_linear(g, w=None) -> AggregationResult:
    """Fixed linear combination: alpha = w (ones by default)."""
    g = _as_gradient_matrix(g)
    alpha = _ones_importance(g.shape[1], w)
    m = gram(g)
    return AggregationResult(
        direction=g @ alpha,
        alpha=alpha,
        condition_number=_raw_condition(m),
    )


def _linear_fallback(g, m, reason: str) -> AggregationResult:
    alpha = np.ones(g.shape[1])
    return AggregationResult(
        direction=g @ alpha,
        alpha=alpha,
        condition_number=_raw_condition(m),
        fallback=True,
        fallback_reason=reason,
    )


def aggregate_nash(g, cfg: NashSolverConfig = NashSolverConfig()) -> AggregationResult:
    """Bargaining weights from :func:`solve_nash`; falls back to linear
    weights (flagged) on zero-gradient tasks or non-convergence."""
    g = _as_gradient_matrix(g)
    m = gram(g)
    try:
        alpha = solve_nash(m, cfg)
    except ZeroGradientTask:
        return _linear_fallback(g, m, "zero_gradient_task")
    except NoConvergence:
        return _linear_fallback(g, m, "no_convergence")
    res = float(np.max(np.abs(m @ alpha - 1.0 / alpha)))
    return AggregationResult(
        direction=g @ alpha,
        alpha=alpha,
        residual=res,
        condition_number=_raw_condition(m),
    )


def aggregate_aligned(g, w=None, rank_tol: float = DEFAULT_RANK_TOL) -> AggregationResult:
    """Align the principal components of the gradient system.

    With M = G^T G and eigenpairs (lambda, V) sorted descending, keep the
    R components above ``rank_tol * lambda_1`` and form
    ``B = sqrt(lambda_R) * V_R diag(1/sqrt(lambda_r)) V_R^T``. Then
    ``alpha = B w`` and the aligned matrix G B has all retained singular
    values equal to sqrt(lambda_R), i.e. condition number 1.
    """
    g = _as_gradient_matrix(g)
    m = gram(g)
    w = _ones_importance(g.shape[1], w)
    if np.all(np.sqrt(np.diag(m)) <= ZERO_NORM_TOL):
        raise AllZeroGradients("every gradient column is zero")
    eig = eigh_sym(m)
    lam = eig.eigenvalues
    r = _retained_count(lam, rank_tol)
    lam_r = lam[r - 1]
    v_r = eig.eigenvectors[:, :r]
    b = np.sqrt(lam_r) * (v_r / np.sqrt(lam[:r])) @ v_r.T
    alpha = b @ w
    # gram(G B) = B M B exactly; its condition number certifies alignment
    aligned_kappa = _raw_condition(b @ m @ b, rank_tol)
    return AggregationResult(
        direction=g @ alpha,
        alpha=alpha,
        condition_number=aligned_kappa,
        extras={"raw_condition_number": _condition_from_eigs(lam, rank_tol)},
    )


def aggregate_dwa(g, hist: LossHistory, temperature: float = 2.0) -> AggregationResult:
    """Dynamic weight averaging over the last two completed epochs.

    alpha_i = T * softmax(r_i / temperature) with
    r_i = L_i(last) / L_i(previous); all ones during the first two
    epochs or when a previous-epoch loss is numerically zero.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    g = _as_gradient_matrix(g)
    n_tasks = g.shape[1]
    m = gram(g)
    if len(hist.per_task) != n_tasks:
        raise ValueError("loss history task count does not match gradient matrix")
    if hist.epochs_completed < 2:
        alpha = np.ones(n_tasks)
    else:
        last = np.array([h[-1] for h in hist.per_task])
        prev = np.array([h[-2] for h in hist.per_task])
        if np.any(prev <= ZERO_DIAG_TOL):
            return _linear_fallback(g, m, "zero_loss")
        ratios = last / prev
        z = np.exp(ratios / temperature - np.max(ratios / temperature))
        alpha = n_tasks * z / np.sum(z)
    return AggregationResult(
        direction=g @ alpha,
        alpha=alpha,
        condition_number=_raw_condition(m),
    )


def _imtl_alpha(m: np.ndarray) -> np.ndarray:
    n_tasks = m.shape[0]
    if n_tasks == 1:
        return np.ones(1)
    norms = np.sqrt(np.diag(m))
    if np.any(norms <= ZERO_NORM_TOL):
        raise ZeroGradientTask("zero gradient column in impartial balancing")
    # Row 0 pins sum(alpha) = 1; row i forces the combined direction to
    # project equally onto unit gradients i and 0.
    system = np.empty((n_tasks, n_tasks))
    system[0, :] = 1.0
    for i in range(1, n_tasks):
        system[i, :] = m[i, :] / norms[i] - m[0, :] / norms[0]
    rhs = np.zeros(n_tasks)
    rhs[0] = 1.0
    if np.linalg.cond(system) > 1e12:
        raise DegenerateSystem("impartial balancing system is singular")
    return np.linalg.solve(system, rhs)


def aggregate_imtl(g) -> AggregationResult:
    """Impartial gradient balancing: sum(alpha) = 1 and the combined
    direction projects equally onto every unit task gradient. Falls back
    to linear weights (flagged) on zero gradients or a singular system."""
    g = _as_gradient_matrix(g)
    m = gram(g)
    try:
        alpha = _imtl_alpha(m)
    except ZeroGradientTask:
        return _linear_fallback(g, m, "zero_gradient_task")
    except DegenerateSystem:
        return _linear_fallback(g, m, "degenerate_system")
    return AggregationResult(
        direction=g @ alpha,
        alpha=alpha,
        condition_number=_raw_condition(m),
    )


def condition_number(g, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """sqrt(lambda_max / lambda_min_retained) of gram(G): the condition
    number of the gradient system, with near-null components dropped."""
    g = _as_gradient_matrix(g)
    m = gram(g)
    kappa = _raw_condition(m, rank_tol)
    if kappa is None:
        raise AllZeroGradients("every gradient column is zero")
    return kappa
