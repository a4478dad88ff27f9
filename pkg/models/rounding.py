import json
import logging
import time
from typing import Any, Callable, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import optimize

from core.distances import (
    ChernoffResult,
    SpectralFrame,
    kl_from_spectrum,
    maximize_over_s,
    projected_arrays,
    spectral_frame,
    sqrtm_pd,
    sym_eigh,
)
from core.errors import QCQPConvergenceError
from core.model import (
    Basis,
    Criterion,
    GaussianPair,
    ProblemInstance,
    SelectionMatrix,
    SolverParams,
    SubspaceBasis,
    UncertaintyModel,
    basis_matrix,
    check_symmetric,
)
from models.relax_robust import greedy_stiefel

logger = logging.getLogger(__name__)

GAP_TOL = 1e-9
VALUE_ATOL = 1e-12
CAP_VALUE_TOL = 1e-9
QUICK_ITERATIONS = 200
MAX_ITERATIONS = 10_000
S_XATOL = 1e-8


class Ellipsoid(BaseModel):
    """
    The set {x : (x - center)^T shape (x - center) <= 1}.

    A missing shape stands for the single point center (infinite k).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    center: np.ndarray
    shape: Optional[np.ndarray] = None

    @field_validator("center", mode="before")
    @classmethod
    def validate_center(cls, value: Any) -> np.ndarray:
        return np.atleast_1d(np.asarray(value, dtype=float))

    @field_validator("shape", mode="before")
    @classmethod
    def validate_shape(cls, value: Any) -> Optional[np.ndarray]:
        if value is None:
            return None
        value = check_symmetric(np.atleast_2d(np.asarray(value, dtype=float)), "shape")
        sym_eigh(value, "ellipsoid shape")
        return value

    @property
    def is_point(self) -> bool:
        return self.shape is None

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        r = x - self.center
        if self.shape is None:
            return bool(np.linalg.norm(r) <= tol)
        return bool(r @ self.shape @ r <= 1.0 + tol)

    def transformed(self, root: np.ndarray) -> "Ellipsoid":
        """Image under x -> root x for a symmetric positive definite root."""
        if self.shape is None:
            return Ellipsoid(center=root @ self.center)
        inv_root = np.linalg.inv(root)
        return Ellipsoid(center=root @ self.center, shape=inv_root @ self.shape @ inv_root)


class _Projector:
    """Euclidean projection onto an ellipsoid and its support function."""

    def __init__(self, ellipsoid: Ellipsoid) -> None:
        self.center = ellipsoid.center
        self.point = ellipsoid.is_point
        if not self.point:
            self.w, self.V = sym_eigh(ellipsoid.shape, "ellipsoid shape")

    def project(self, y: np.ndarray) -> np.ndarray:
        if self.point:
            return self.center
        r = self.V.T @ (y - self.center)
        wr2 = self.w * r**2
        if np.sum(wr2) <= 1.0:
            return y
        # phi(mu) = sum w r^2 / (1 + mu w)^2 is convex decreasing, so Newton from 0 is monotone
        mu = 0.0
        for _ in range(200):
            denom = 1.0 + mu * self.w
            phi = np.sum(wr2 / denom**2) - 1.0
            if phi <= 1e-15:
                break
            dphi = -2.0 * np.sum(self.w * wr2 / denom**3)
            mu -= phi / dphi
        return self.center + self.V @ (r / (1.0 + mu * self.w))

    def support(self, u: np.ndarray) -> float:
        """max of u^T x over the ellipsoid."""
        if self.point:
            return float(u @ self.center)
        c = self.V.T @ u
        return float(u @ self.center + np.sqrt(np.sum(c**2 / self.w)))


class QCQPResult(NamedTuple):
    value: float
    m0: np.ndarray
    m1: np.ndarray
    iterations: int


def _pull_inside(ellipsoid: Ellipsoid, step: np.ndarray) -> np.ndarray:
    if ellipsoid.is_point:
        return ellipsoid.center
    q = float(step @ ellipsoid.shape @ step)
    return ellipsoid.center + (step / np.sqrt(q) if q > 1.0 else step)


def _dual_bound(f0: Ellipsoid, f1: Ellipsoid) -> tuple[float, np.ndarray, np.ndarray, int]:
    """
    Lagrange dual of the squared distance between two ellipsoids.

    For multipliers mu_i > 0 the dual value is D^T M^{-1} D - sum mu_i with
    D = c1 - c0 and M = I + sum shape_i^{-1} / mu_i. It is maximized over
    log mu by BFGS; the stationary points of the Lagrangian are pulled back
    into the ellipsoids to give a feasible pair.

    Returns:
        tuple[float, np.ndarray, np.ndarray, int]: Dual value, feasible points
            in f0 and f1, and the number of BFGS iterations.
    """
    D = f1.center - f0.center
    inverses = [None if f.is_point else np.linalg.inv(f.shape) for f in (f0, f1)]
    active = [i for i, B in enumerate(inverses) if B is not None]

    def stationary(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = np.exp(np.clip(rho, -60.0, 60.0))
        M = np.eye(D.shape[0]) + sum(inverses[i] / m for i, m in zip(active, mu))
        return mu, np.linalg.solve(M, D)

    def negative_dual(rho: np.ndarray) -> tuple[float, np.ndarray]:
        mu, v = stationary(rho)
        grad = np.array([v @ inverses[i] @ v / m - m for i, m in zip(active, mu)])
        return -(float(D @ v) - float(np.sum(mu))), -grad

    radii = np.array([np.sqrt(np.linalg.eigvalsh(inverses[i])[-1]) for i in active])
    start = np.log(np.linalg.norm(D) * radii)
    fit = optimize.minimize(negative_dual, start, jac=True, method="BFGS", options={"gtol": 1e-13, "maxiter": 500})
    mu, v = stationary(fit.x)
    steps = {0: np.zeros_like(D), 1: np.zeros_like(D)}
    for i, m in zip(active, mu):
        steps[i] = (1.0 if i == 0 else -1.0) * (inverses[i] @ v) / m
    value = float(D @ v) - float(np.sum(mu))
    return value, _pull_inside(f0, steps[0]), _pull_inside(f1, steps[1]), int(fit.nit)


class _Alternation(NamedTuple):
    converged: bool
    value: float
    a: np.ndarray
    b: np.ndarray
    rounds: int
    gap: float
    value_gap: float


def qcqp_min_quadratic(e0: Ellipsoid, e1: Ellipsoid, metric: np.ndarray) -> QCQPResult:
    """
    Minimizes (m1 - m0)^T metric (m1 - m0) over m0 in e0 and m1 in e1.

    Both ellipsoids are mapped by metric^{1/2}, where the problem becomes the
    squared Euclidean distance between two ellipsoids. Alternating projections,
    certified by the separating-hyperplane bound built from the support
    functions, run for QUICK_ITERATIONS rounds. If the gap is still open, the
    Lagrange dual over the two multipliers supplies a lower bound and a
    feasible pair, and the projections resume from that pair. Iteration stops
    once the relative gap on the distance or the absolute gap on its square is
    closed.

    Args:
        e0 (Ellipsoid): Feasible set for m0.
        e1 (Ellipsoid): Feasible set for m1.
        metric (np.ndarray): Symmetric positive definite weight.

    Returns:
        QCQPResult: Optimal value and the minimizers m0', m1' (0 when the sets meet).

    Raises:
        QCQPConvergenceError: If the squared-distance gap is still above
            CAP_VALUE_TOL after the iteration cap.
    """
    root = sqrtm_pd(check_symmetric(metric, "metric"), "metric")
    inv_root = np.linalg.inv(root)
    f0, f1 = e0.transformed(root), e1.transformed(root)
    scale = 1.0 + np.linalg.norm(f0.center) + np.linalg.norm(f1.center)
    value_atol = VALUE_ATOL * scale**2

    if f0.is_point and f1.is_point:
        diff = f1.center - f0.center
        return QCQPResult(float(diff @ diff), e0.center, e1.center, 0)
    if f0.contains(f1.center) or f1.contains(f0.center):
        meet = f1.center if f0.contains(f1.center) else f0.center
        return QCQPResult(0.0, inv_root @ meet, inv_root @ meet, 0)

    p0, p1 = _Projector(f0), _Projector(f1)

    def alternate(b: np.ndarray, floor: float, limit: int) -> _Alternation:
        a, upper, gap, value_gap = b, np.inf, np.inf, np.inf
        for rounds in range(1, limit + 1):
            a = p0.project(b)
            if not f1.is_point and f1.contains(a):
                return _Alternation(True, 0.0, a, a, rounds, 0.0, 0.0)
            b = p1.project(a)
            diff = b - a
            upper = float(np.linalg.norm(diff))
            if upper <= 1e-13 * scale:
                return _Alternation(True, 0.0, a, b, rounds, 0.0, 0.0)
            u = diff / upper
            lower = max(-p1.support(-u) - p0.support(u), floor, 0.0)
            gap, value_gap = upper - lower, upper**2 - lower**2
            if gap <= GAP_TOL * max(upper, 1e-6 * scale) or value_gap <= value_atol:
                return _Alternation(True, upper**2, a, b, rounds, gap, value_gap)
        return _Alternation(False, upper**2, a, b, limit, gap, value_gap)

    def finish(run: _Alternation, iterations: int) -> QCQPResult:
        logger.debug(f"QCQP converged in {iterations} iterations, squared distance {run.value:.6e}")
        return QCQPResult(run.value, inv_root @ run.a, inv_root @ run.b, iterations)

    quick = alternate(p1.project(f0.center), 0.0, QUICK_ITERATIONS)
    if quick.converged:
        return finish(quick, quick.rounds)

    dual, a, b, steps = _dual_bound(f0, f1)
    floor = float(np.sqrt(max(dual, 0.0)))
    upper = float(np.linalg.norm(b - a))
    iterations = QUICK_ITERATIONS + steps
    if upper**2 - floor**2 <= max(2.0 * GAP_TOL * upper**2, value_atol):
        return finish(_Alternation(True, upper**2, a, b, 0, upper - floor, upper**2 - floor**2), iterations)

    run = alternate(b, floor, MAX_ITERATIONS)
    iterations += run.rounds
    if run.converged:
        return finish(run, iterations)
    if run.value_gap <= CAP_VALUE_TOL * scale**2:
        logger.warning(f"QCQP hit {iterations} iterations, returning the upper bound (squared gap {run.value_gap:.3e})")
        return QCQPResult(run.value, inv_root @ run.a, inv_root @ run.b, iterations)
    raise QCQPConvergenceError(iterations, run.gap)


def _transformed_ellipsoids(
    frame: SpectralFrame, c0: np.ndarray, c1: np.ndarray, uncertainty: UncertaintyModel
) -> tuple[Ellipsoid, Ellipsoid]:
    p = frame.eigvals.shape[0]
    shape0 = None if np.isinf(uncertainty.k0) else uncertainty.k0 * np.eye(p)
    shape1 = None if np.isinf(uncertainty.k1) else uncertainty.k1 * np.diag(1.0 / frame.eigvals)
    return Ellipsoid(center=c0, shape=shape0), Ellipsoid(center=c1, shape=shape1)


class WorstCaseProblem(NamedTuple):
    """A projected instance in the frame where A0 = I and A1 = Lambda."""

    frame: SpectralFrame
    e0: Ellipsoid
    e1: Ellipsoid
    E: np.ndarray

    def mean_term(self, metric_diag: np.ndarray) -> QCQPResult:
        if self.e0.is_point and self.e1.is_point:
            diff = self.e1.center - self.e0.center
            return QCQPResult(float(diff @ (metric_diag * diff)), self.e0.center, self.e1.center, 0)
        return qcqp_min_quadratic(self.e0, self.e1, np.diag(metric_diag))


def worst_case_problem(basis: Basis, pair: GaussianPair, uncertainty: UncertaintyModel) -> WorstCaseProblem:
    E = basis_matrix(basis, pair.dim)
    _, A0, A1 = projected_arrays(pair, E)
    frame = spectral_frame(A0, A1)
    c0 = frame.transform @ (E.T @ pair.m0)
    c1 = frame.transform @ (E.T @ pair.m1)
    e0, e1 = _transformed_ellipsoids(frame, c0, c1, uncertainty)
    return WorstCaseProblem(frame=frame, e0=e0, e1=e1, E=E)


def worst_case_kl(basis: Basis, pair: GaussianPair, uncertainty: UncertaintyModel) -> float:
    """
    KL distance of the projected pair minimized over the mean uncertainty ellipsoids.

    Args:
        basis (SelectionMatrix | SubspaceBasis | np.ndarray): Projection E.
        pair (GaussianPair): Nominal pair.
        uncertainty (UncertaintyModel): Ellipsoid sizes k0, k1.

    Returns:
        float: The worst-case KL distance; the plain KL distance when k0 = k1 = inf.
    """
    problem = worst_case_problem(basis, pair, uncertainty)
    lam = problem.frame.eigvals
    if uncertainty.is_exact:
        z = problem.e1.center - problem.e0.center
        return kl_from_spectrum(lam, z)
    q = problem.mean_term(np.ones_like(lam)).value
    return max(0.5 * (q + float(np.sum(lam - np.log(lam) - 1.0))), 0.0)


def worst_case_c_objective(s: float, problem: WorstCaseProblem) -> float:
    """Chernoff s-divergence minimized over the mean ellipsoids, for a fixed s."""
    if s <= 0.0 or s >= 1.0:
        return 0.0
    lam = problem.frame.eigvals
    blend = s + (1.0 - s) * lam
    q = problem.mean_term(1.0 / blend).value
    return 0.5 * (s * (1.0 - s) * q - float(np.sum((1.0 - s) * np.log(lam) - np.log(blend))))


def worst_case_c(basis: Basis, pair: GaussianPair, uncertainty: UncertaintyModel) -> ChernoffResult:
    """
    Worst-case Chernoff distance and its exponent.

    The minimum over means of a concave function of s is concave, so the
    outer maximum is a bounded scalar search on [0, 1].

    Returns:
        ChernoffResult: The value and the maximizing s (0.5 when the value is 0).
    """
    problem = worst_case_problem(basis, pair, uncertainty)
    return maximize_over_s(lambda s: worst_case_c_objective(s, problem), xatol=S_XATOL)


def worst_case_value(
    basis: Basis, pair: GaussianPair, uncertainty: UncertaintyModel, criterion: Criterion
) -> float:
    if Criterion(criterion) is Criterion.KL:
        return worst_case_kl(basis, pair, uncertainty)
    return worst_case_c(basis, pair, uncertainty).value


def worst_case_means(
    basis: Basis, pair: GaussianPair, uncertainty: UncertaintyModel
) -> tuple[np.ndarray, np.ndarray]:
    """
    Drifted n-dimensional means attaining the worst-case KL mean term.

    Each drift has the form S_i E (E^T S_i E)^{-1} u_i, which stays inside the
    n-dimensional ellipsoid and projects onto the p-dimensional minimizer.
    """
    problem = worst_case_problem(basis, pair, uncertainty)
    result = problem.mean_term(np.ones_like(problem.frame.eigvals))
    T_inv = np.linalg.inv(problem.frame.transform)
    E = problem.E
    means = []
    for m_hat, S, w, c in (
        (pair.m0, pair.S0, result.m0, problem.e0.center),
        (pair.m1, pair.S1, result.m1, problem.e1.center),
    ):
        u = T_inv @ (w - c)
        means.append(m_hat + S @ E @ np.linalg.solve(E.T @ S @ E, u))
    return means[0], means[1]


def drifted_pair(basis: Basis, pair: GaussianPair, uncertainty: UncertaintyModel) -> GaussianPair:
    """Pair with the worst-case means for basis and the nominal covariances."""
    m0, m1 = worst_case_means(basis, pair, uncertainty)
    return GaussianPair(m0=m0, m1=m1, S0=pair.S0, S1=pair.S1)


def project_to_selection(E: SubspaceBasis | np.ndarray, p: int) -> SelectionMatrix:
    """
    Rounds a Stiefel point to the p sensors with the largest diagonal of E E^T.

    Ties go to the lowest sensor index.
    """
    cols = E.cols if isinstance(E, SubspaceBasis) else np.asarray(E, dtype=float)
    weight = np.round(np.sum(cols**2, axis=1), 12)
    order = np.argsort(-weight, kind="stable")
    return SelectionMatrix.from_zero_based(cols.shape[0], order[:p])


class RefinementResult(NamedTuple):
    selection: SelectionMatrix
    objective: float
    trace: list[float]


def refine_with_trace(
    start: SelectionMatrix,
    evaluate: Callable[[Sequence[int]], float],
) -> RefinementResult:
    """
    p coordinate passes over the columns of a selection.

    Pass j tries every sensor not held by another column in place of column j,
    in ascending order, and keeps a replacement only on strict improvement.

    Args:
        start (SelectionMatrix): Starting selection.
        evaluate (Callable): Objective of a list of zero-based sensors.

    Returns:
        RefinementResult: Final selection, its objective and the objective frozen
            after each pass, preceded by the starting value.
    """
    n = start.n
    cols = [int(i) for i in start.zero_based]
    cache: dict[frozenset, float] = {}

    def value(candidate: list[int]) -> float:
        key = frozenset(candidate)
        if key not in cache:
            cache[key] = evaluate(sorted(candidate))
        return cache[key]

    current = value(cols)
    trace = [current]
    for j in range(len(cols)):
        others = set(cols[:j] + cols[j + 1:])
        for sensor in range(n):
            if sensor in others or sensor == cols[j]:
                continue
            trial = cols[:j] + [sensor] + cols[j + 1:]
            trial_value = value(trial)
            if trial_value > current:
                logger.debug(f"Pass {j + 1}: sensor {cols[j] + 1} -> {sensor + 1}, {current:.6g} -> {trial_value:.6g}")
                cols, current = trial, trial_value
        trace.append(current)
    return RefinementResult(SelectionMatrix.from_zero_based(n, cols), current, trace)


def selection_evaluator(
    pair: GaussianPair, uncertainty: UncertaintyModel, criterion: Criterion
) -> Callable[[Sequence[int]], float]:
    n = pair.dim

    def evaluate(sensors: Sequence[int]) -> float:
        return worst_case_value(SelectionMatrix.from_zero_based(n, sensors), pair, uncertainty, criterion)

    return evaluate


def refine(
    start: SelectionMatrix,
    pair: GaussianPair,
    uncertainty: UncertaintyModel,
    criterion: Criterion = Criterion.KL,
) -> SelectionMatrix:
    """
    Local search around a selection by single-sensor swaps, one pass per column.

    Returns:
        SelectionMatrix: A selection whose worst-case criterion is at least the start's.
    """
    return refine_with_trace(start, selection_evaluator(pair, uncertainty, criterion)).selection


class PhaseRecord(BaseModel):
    phase: str
    objective: float
    elapsed_ms: float


class PipelineResult(BaseModel):
    """
    Outcome of a relaxation, projection and refinement pipeline.

    Attributes:
        algorithm (str): Pipeline name, e.g. "R-KL".
        selection (SelectionMatrix): Chosen sensors.
        objective (float): Worst-case criterion of the selection.
        stiefel_objective (float): Criterion of the relaxed basis.
        phase_trace (list[PhaseRecord]): Objective and wall time per phase.
        refinement_trace (list[float]): Objective frozen after every refinement pass.
        s_star (float, optional): Chernoff exponent of the selection.
    """

    model_config = ConfigDict(frozen=True)

    algorithm: str
    criterion: Criterion
    selection: SelectionMatrix
    objective: float = Field(ge=0.0)
    stiefel_objective: float
    phase_trace: list[PhaseRecord] = []
    refinement_trace: list[float] = []
    s_star: Optional[float] = None

    def phase(self, name: str) -> PhaseRecord:
        return next(record for record in self.phase_trace if record.phase == name)

    def to_dict(self) -> dict:
        result = {
            "algorithm": self.algorithm,
            "criterion": self.criterion.value,
            "selection": list(self.selection.indices),
            "objective": self.objective,
            "stiefel_objective": self.stiefel_objective,
            "phases": [record.model_dump() for record in self.phase_trace],
            "refinement_trace": self.refinement_trace,
        }
        if self.s_star is not None:
            result["s_star"] = self.s_star
        return result

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _elapsed_ms(since: float) -> float:
    return (time.perf_counter() - since) * 1000.0


def run_pipeline(
    algorithm: str,
    instance: ProblemInstance,
    criterion: Criterion,
    relax: Callable[[], SubspaceBasis],
    uncertainty: UncertaintyModel,
) -> PipelineResult:
    """
    Chains a relaxation with projection to a selection and refinement.

    Args:
        algorithm (str): Name recorded in the result.
        instance (ProblemInstance): Instance to solve.
        criterion (Criterion): Criterion used by every phase.
        relax (Callable): Produces the relaxed n x p basis.
        uncertainty (UncertaintyModel): Uncertainty the phases evaluate with.

    Returns:
        PipelineResult: Selection, objectives and timings.
    """
    pair, p = instance.pair, instance.p
    evaluate = selection_evaluator(pair, uncertainty, criterion)

    started = time.perf_counter()
    basis = relax()
    stiefel_objective = worst_case_value(basis, pair, uncertainty, criterion)
    phases = [PhaseRecord(phase="relaxation", objective=stiefel_objective, elapsed_ms=_elapsed_ms(started))]
    logger.info(f"{algorithm}: relaxation objective {stiefel_objective:.6g} in {phases[-1].elapsed_ms:.1f} ms")

    started = time.perf_counter()
    projected = project_to_selection(basis, p)
    projected_objective = evaluate(list(projected.zero_based))
    phases.append(PhaseRecord(phase="projection", objective=projected_objective, elapsed_ms=_elapsed_ms(started)))
    logger.info(f"{algorithm}: projection {projected.indices} objective {projected_objective:.6g}")

    started = time.perf_counter()
    refined = refine_with_trace(projected, evaluate)
    phases.append(PhaseRecord(phase="refinement", objective=refined.objective, elapsed_ms=_elapsed_ms(started)))
    logger.info(
        f"{algorithm}: refinement {refined.selection.indices} objective {refined.objective:.6g} "
        f"in {phases[-1].elapsed_ms:.1f} ms"
    )

    s_star = None
    if Criterion(criterion) is Criterion.C:
        s_star = worst_case_c(refined.selection, pair, uncertainty).s_star
    return PipelineResult(
        algorithm=algorithm,
        criterion=criterion,
        selection=refined.selection,
        objective=refined.objective,
        stiefel_objective=stiefel_objective,
        phase_trace=phases,
        refinement_trace=refined.trace,
        s_star=s_star,
    )


def r_kl(instance: ProblemInstance, params: Optional[SolverParams] = None) -> PipelineResult:
    """Robust KL pipeline: greedy relaxation, projection and refinement."""
    return run_pipeline(
        "R-KL", instance, Criterion.KL,
        lambda: greedy_stiefel(instance.pair, instance.uncertainty, instance.p, Criterion.KL, params),
        instance.uncertainty,
    )


def r_c(instance: ProblemInstance, params: Optional[SolverParams] = None) -> PipelineResult:
    """Robust Chernoff pipeline: greedy relaxation, projection and refinement."""
    return run_pipeline(
        "R-C", instance, Criterion.C,
        lambda: greedy_stiefel(instance.pair, instance.uncertainty, instance.p, Criterion.C, params),
        instance.uncertainty,
    )
