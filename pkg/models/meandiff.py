import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg, optimize

from core.distances import inv_sqrtm_pd, sym_eigh
from core.errors import DimensionMismatchError, UncertaintyNotSupportedError
from core.model import (
    Criterion,
    GaussianPair,
    ProblemInstance,
    SubspaceBasis,
    UncertaintyModel,
    check_symmetric,
)
from models.rounding import PipelineResult, run_pipeline

logger = logging.getLogger(__name__)

S_LOW = 1e-9
S_HIGH = 1.0 - 1e-9
ZERO_MEAN_GAP = 1e-12


def phi_kl(x):
    """x - log x - 1; zero only at x = 1."""
    x = np.asarray(x, dtype=float)
    value = x - np.log(x) - 1.0
    return float(value) if value.ndim == 0 else value


def phi_c(s: float, x):
    """log(s + (1 - s) x) - (1 - s) log x; zero at s = 0, s = 1 and x = 1."""
    x = np.asarray(x, dtype=float)
    value = np.log(s + (1.0 - s) * x) - (1.0 - s) * np.log(x)
    return float(value) if value.ndim == 0 else value


def _dphi_c(s: float, x: np.ndarray) -> float:
    return float(np.sum((1.0 - x) / (s + (1.0 - s) * x) + np.log(x)))


def _d2phi_c(s: float, x: np.ndarray) -> float:
    return float(-np.sum((1.0 - x) ** 2 / (s + (1.0 - s) * x) ** 2))


def best_exponent(x: np.ndarray) -> float:
    """
    Maximizer over s of sum_i phi_c(s, x_i).

    The sum is concave in s. Newton starts at 0.5; if it leaves
    [1e-9, 1 - 1e-9] or fails, the derivative root is bracketed instead.
    """
    x = np.asarray(x, dtype=float)
    if _d2phi_c(0.5, x) == 0.0:
        return 0.5
    try:
        result = optimize.root_scalar(
            lambda s: _dphi_c(s, x), x0=0.5, fprime=lambda s: _d2phi_c(s, x),
            method="newton", xtol=1e-14, maxiter=100,
        )
        if result.converged and S_LOW <= result.root <= S_HIGH:
            return float(result.root)
    except (ZeroDivisionError, RuntimeError, ValueError) as error:
        logger.debug(f"Newton on s failed ({error}), falling back to bracketing")
    lo, hi = _dphi_c(S_LOW, x), _dphi_c(S_HIGH, x)
    if lo <= 0.0:
        return S_LOW
    if hi >= 0.0:
        return S_HIGH
    return float(optimize.brentq(lambda s: _dphi_c(s, x), S_LOW, S_HIGH, xtol=1e-14))


class EigenSelection(BaseModel):
    """
    Solution of the equal-means problem by eigenvalue selection.

    Attributes:
        switching_index (int): Number j* of smallest eigenvalues kept; the other
            p - j* are the largest ones.
        chosen_eigs (np.ndarray): The p selected eigenvalues, ascending.
        chosen_vecs (np.ndarray): n x p orthonormal eigenvectors of the chosen eigenvalues.
        objective (float): Sum of phi over the chosen eigenvalues.
        s_star (float, optional): Chernoff exponent, Chernoff criterion only.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    switching_index: int
    chosen_eigs: np.ndarray
    chosen_vecs: np.ndarray
    objective: float
    s_star: Optional[float] = None


def switching_candidates(n: int, p: int) -> list[np.ndarray]:
    """Index sets {1..j} U {n-p+j+1..n} (zero-based) for j = 0..p."""
    return [np.r_[np.arange(j), np.arange(n - p + j, n)] for j in range(p + 1)]


def _eigen_solve(S: np.ndarray, p: int, criterion: Criterion) -> EigenSelection:
    S = check_symmetric(S, "S")
    n = S.shape[0]
    if not 1 <= p <= n:
        raise DimensionMismatchError(f"p = {p} must lie in [1, {n}]")
    lam, V = sym_eigh(S, "S")
    best: Optional[EigenSelection] = None
    for j, idx in enumerate(switching_candidates(n, p)):
        x = lam[idx]
        if Criterion(criterion) is Criterion.KL:
            objective, s_star = float(np.sum(phi_kl(x))), None
        else:
            s_star = best_exponent(x)
            objective = float(np.sum(phi_c(s_star, x)))
        if best is None or objective > best.objective:
            best = EigenSelection(
                switching_index=j, chosen_eigs=x, chosen_vecs=V[:, idx],
                objective=objective, s_star=s_star,
            )
    if best.objective <= 0.0 and best.s_star is not None:
        best = best.model_copy(update={"objective": 0.0, "s_star": 0.5})
    return best


def eqmeans_kl(S: np.ndarray, p: int) -> EigenSelection:
    """
    Equal-means KL problem: the best p eigenvalues of S for sum phi_kl.

    Only the p + 1 switching candidates are evaluated; the optimum always takes
    some smallest and some largest eigenvalues.
    """
    return _eigen_solve(S, p, Criterion.KL)


def eqmeans_c(S: np.ndarray, p: int) -> EigenSelection:
    """Equal-means Chernoff problem over the same switching candidates, with s per candidate."""
    return _eigen_solve(S, p, Criterion.C)


def _orthonormalize_first_fixed(raw: np.ndarray) -> np.ndarray:
    Q, R = linalg.qr(raw, mode="economic")
    Q = Q * np.where(np.diag(R) < 0, -1.0, 1.0)
    for j in range(1, Q.shape[1]):
        if Q[np.argmax(np.abs(Q[:, j])), j] < 0:
            Q[:, j] = -Q[:, j]
    return Q


def md_relaxation(
    pair: GaussianPair,
    p: int,
    criterion: Criterion = Criterion.KL,
    return_raw: bool = False,
):
    """
    Relaxation of the mean-difference solvers.

    The first column is the normalized mean difference. The remaining p - 1
    columns solve the equal-means problem of the pair restricted to its
    orthogonal complement U, lifted by U (U^T S0 U)^{-1/2}. The columns are then
    orthonormalized with the first one kept.

    Args:
        pair (GaussianPair): Pair with exactly known means.
        p (int): Number of columns.
        criterion (Criterion): KL or C.
        return_raw (bool): Also return the columns before orthonormalization.

    Returns:
        SubspaceBasis | tuple[SubspaceBasis, np.ndarray]: The basis, and the raw
            columns if requested.
    """
    n = pair.dim
    if not 1 <= p <= n:
        raise DimensionMismatchError(f"p = {p} must lie in [1, {n}]")
    delta = pair.delta
    gap = np.linalg.norm(delta)

    if gap < ZERO_MEAN_GAP:
        W0 = inv_sqrtm_pd(np.asarray(pair.S0), "S0")
        eig = _eigen_solve(W0 @ pair.S1 @ W0, p, criterion)
        raw = W0 @ eig.chosen_vecs
        logger.debug(f"Equal means: switching index {eig.switching_index}")
        cols = _orthonormalize_first_fixed(raw)
    else:
        e1 = delta / gap
        raw = e1[:, None]
        if p > 1:
            Q, _ = linalg.qr(raw, mode="full")
            U = Q[:, 1:]
            W = inv_sqrtm_pd(U.T @ pair.S0 @ U, "complement S0")
            eig = _eigen_solve(W @ (U.T @ pair.S1 @ U) @ W, p - 1, criterion)
            raw = np.column_stack([e1, U @ W @ eig.chosen_vecs])
            logger.debug(f"Mean difference: switching index {eig.switching_index} for {p - 1} columns")
        cols = _orthonormalize_first_fixed(raw)
    logger.debug(f"Raw mean-difference basis:\n{raw}")

    basis = SubspaceBasis(cols=cols)
    return (basis, raw) if return_raw else basis


def _require_exact(instance: ProblemInstance, name: str) -> None:
    if not instance.uncertainty.is_exact:
        raise UncertaintyNotSupportedError(
            f"{name} assumes exactly known means (k0 = k1 = inf), got "
            f"k0 = {instance.uncertainty.k0}, k1 = {instance.uncertainty.k1}; use the robust pipelines"
        )


def md_kl(instance: ProblemInstance) -> PipelineResult:
    """Mean-difference KL pipeline for instances without mean uncertainty."""
    _require_exact(instance, "MD-KL")
    return run_pipeline(
        "MD-KL", instance, Criterion.KL,
        lambda: md_relaxation(instance.pair, instance.p, Criterion.KL),
        UncertaintyModel.exact(),
    )


def md_c(instance: ProblemInstance) -> PipelineResult:
    """Mean-difference Chernoff pipeline for instances without mean uncertainty."""
    _require_exact(instance, "MD-C")
    return run_pipeline(
        "MD-C", instance, Criterion.C,
        lambda: md_relaxation(instance.pair, instance.p, Criterion.C),
        UncertaintyModel.exact(),
    )
