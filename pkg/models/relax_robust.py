import logging
import math
from typing import Callable, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg, optimize

from core.distances import inv_sqrtm_pd, whiten
from core.errors import DimensionMismatchError
from core.model import (
    Criterion,
    GaussianPair,
    SolverParams,
    SubspaceBasis,
    UncertaintyModel,
)
from models.numrange import (
    BoundarySample,
    boundary_sample,
    maximize_over_boundary,
    reconstruct_generator,
)

logger = logging.getLogger(__name__)


def _mean_gap(x, y, k0: float, k1: float) -> np.ndarray:
    """Worst-case whitened mean gap (sqrt(y) - sqrt(x)/sqrt(k1) - 1/sqrt(k0))^+."""
    x = np.asarray(x, dtype=float)
    y = np.clip(np.asarray(y, dtype=float), 0.0, None)
    gap = np.sqrt(y) - np.sqrt(x) / math.sqrt(k1) - 1.0 / math.sqrt(k0)
    return np.maximum(gap, 0.0)


def psi_kl(x, y, k0: float = math.inf, k1: float = math.inf):
    """
    Single-direction robust KL profile x - log x + gap(x, y)^2.

    Vectorized over x and y. For p = 1 the worst-case KL distance of a direction
    with whitened coordinates (x, y) equals (psi_kl(x, y) - 1) / 2.
    """
    x = np.asarray(x, dtype=float)
    value = x - np.log(x) + _mean_gap(x, y, k0, k1) ** 2
    return float(value) if value.ndim == 0 else value


def psi_c(s: float, x, y, k0: float = math.inf, k1: float = math.inf):
    """
    Single-direction robust Chernoff profile at exponent s.

    Returns s(1-s)/2 gap^2 / (s + (1-s) x) - (1-s)/2 log x + 1/2 log(s + (1-s) x).
    """
    x = np.asarray(x, dtype=float)
    blend = s + (1.0 - s) * x
    value = (
        0.5 * s * (1.0 - s) * _mean_gap(x, y, k0, k1) ** 2 / blend
        - 0.5 * (1.0 - s) * np.log(x)
        + 0.5 * np.log(blend)
    )
    return float(value) if value.ndim == 0 else value


class DirectionCloud(NamedTuple):
    """Candidate whitened directions with their (x, y) coordinates."""

    x: np.ndarray
    y: np.ndarray
    pick: Callable[[int], np.ndarray]
    sample: Optional[BoundarySample] = None

    def argmax(self, objective: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> int:
        """Index of the best candidate, first in sample order on ties."""
        if self.sample is not None:
            return maximize_over_boundary(self.sample, objective).index
        return int(np.argmax(objective(self.x, self.y)))


def _direction_cloud(S: np.ndarray, M: np.ndarray, params: SolverParams) -> DirectionCloud:
    n = S.shape[0]
    if n == 1:
        return DirectionCloud(np.array([S[0, 0]]), np.array([M[0, 0]]), lambda i: np.ones(1))
    if n == 2:
        theta = np.arange(params.angle_grid) * (math.pi / params.angle_grid)
        V = np.column_stack([np.cos(theta), np.sin(theta)])
        xs = np.einsum("ki,ij,kj->k", V, S, V)
        ys = np.einsum("ki,ij,kj->k", V, M, V)
        return DirectionCloud(xs, ys, lambda i: V[i])

    sample = boundary_sample(S, M, params.grid_size, params.interp_count, params.gap_threshold)

    def pick(i: int) -> np.ndarray:
        result = reconstruct_generator(S, M, sample.point(i), sample)
        return result.vector

    return DirectionCloud(sample.x, sample.y, pick, sample)


def _lift(pair: GaussianPair, v: np.ndarray) -> np.ndarray:
    e = inv_sqrtm_pd(np.asarray(pair.S0), "S0") @ v
    e = e / np.linalg.norm(e)
    return e if e[np.argmax(np.abs(e))] > 0 else -e


def solve_1d_kl(
    pair: GaussianPair,
    uncertainty: UncertaintyModel = UncertaintyModel(),
    params: Optional[SolverParams] = None,
) -> np.ndarray:
    """
    Best single direction for the worst-case KL distance.

    Args:
        pair (GaussianPair): The pair to select from.
        uncertainty (UncertaintyModel): Mean uncertainty sizes.
        params (SolverParams, optional): Sampling parameters.

    Returns:
        np.ndarray: Unit vector e*, sign-normalized so its largest entry is positive.
    """
    params = params or SolverParams()
    if pair.dim == 1:
        return np.ones(1)
    white = whiten(pair)
    cloud = _direction_cloud(white.S, white.M, params)
    best = cloud.argmax(lambda x, y: psi_kl(x, y, uncertainty.k0, uncertainty.k1))
    return _lift(pair, cloud.pick(best))


def solve_1d_c(
    pair: GaussianPair,
    uncertainty: UncertaintyModel = UncertaintyModel(),
    params: Optional[SolverParams] = None,
) -> tuple[np.ndarray, float]:
    """
    Best single direction and exponent for the worst-case Chernoff distance.

    The inner maximum over directions is evaluated on one boundary sample for
    every s of a uniform grid; the best grid s is then polished by a bounded
    scalar search between its neighbours.

    Returns:
        tuple[np.ndarray, float]: The unit vector e* and the exponent s*.
    """
    params = params or SolverParams()
    white = whiten(pair)
    cloud = _direction_cloud(white.S, white.M, params)

    def inner(s: float) -> float:
        return float(np.max(psi_c(s, cloud.x, cloud.y, uncertainty.k0, uncertainty.k1)))

    grid = np.linspace(0.0, 1.0, params.s_grid)
    values = np.array([inner(s) for s in grid])
    i = int(np.argmax(values))
    s_star = float(grid[i])
    if values[i] > 0.0:
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        polish = optimize.minimize_scalar(
            lambda s: -inner(s), bounds=(lo, hi), method="bounded", options={"xatol": 1e-8}
        )
        if -polish.fun >= values[i]:
            s_star = float(polish.x)
    else:
        s_star = 0.5

    best = cloud.argmax(lambda x, y: psi_c(s_star, x, y, uncertainty.k0, uncertainty.k1))
    return _lift(pair, cloud.pick(best)), s_star


class GreedyState(BaseModel):
    """
    Progress of the greedy column-by-column relaxation.

    Attributes:
        chosen (np.ndarray): n x j matrix of the columns chosen so far.
        complement (np.ndarray): n x (n - j) orthonormal basis of their complement.
        reduced (GaussianPair): The pair projected onto the complement.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pair: GaussianPair
    chosen: np.ndarray
    complement: np.ndarray
    reduced: GaussianPair

    @classmethod
    def start(cls, pair: GaussianPair) -> "GreedyState":
        return cls(pair=pair, chosen=np.zeros((pair.dim, 0)), complement=np.eye(pair.dim), reduced=pair)

    def extend(self, e_reduced: np.ndarray) -> "GreedyState":
        """Lifts a reduced-space unit vector, appends it and deflates."""
        e = self.complement @ e_reduced
        e = e / np.linalg.norm(e)
        e = e if e[np.argmax(np.abs(e))] > 0 else -e
        chosen = np.column_stack([self.chosen, e])
        Q, _ = linalg.qr(chosen, mode="full")
        U = Q[:, chosen.shape[1]:]
        S0 = U.T @ self.pair.S0 @ U
        S1 = U.T @ self.pair.S1 @ U
        if U.shape[1] == 0:
            reduced = self.reduced
        else:
            reduced = GaussianPair(
                m0=U.T @ self.pair.m0, m1=U.T @ self.pair.m1,
                S0=0.5 * (S0 + S0.T), S1=0.5 * (S1 + S1.T),
            )
        return GreedyState(pair=self.pair, chosen=chosen, complement=U, reduced=reduced)


def greedy_stiefel(
    pair: GaussianPair,
    uncertainty: UncertaintyModel,
    p: int,
    criterion: Criterion = Criterion.KL,
    params: Optional[SolverParams] = None,
) -> SubspaceBasis:
    """
    Greedy relaxation over orthonormal n x p bases.

    Column j solves the single-direction problem on the pair restricted to the
    orthogonal complement of columns 1..j-1 and is lifted back to R^n.

    Args:
        pair (GaussianPair): The pair to select from.
        uncertainty (UncertaintyModel): Mean uncertainty sizes.
        p (int): Number of columns.
        criterion (Criterion): KL or C.
        params (SolverParams, optional): Sampling parameters.

    Returns:
        SubspaceBasis: The greedy basis.

    Raises:
        DimensionMismatchError: If p is outside [1, n].
    """
    if not 1 <= p <= pair.dim:
        raise DimensionMismatchError(f"p = {p} must lie in [1, {pair.dim}]")
    params = params or SolverParams()
    state = GreedyState.start(pair)
    for j in range(p):
        if Criterion(criterion) is Criterion.KL:
            e_reduced = solve_1d_kl(state.reduced, uncertainty, params)
        else:
            e_reduced, s_star = solve_1d_c(state.reduced, uncertainty, params)
            logger.debug(f"Greedy column {j + 1}: s* = {s_star:.6f}")
        state = state.extend(e_reduced)
        logger.debug(f"Greedy column {j + 1}/{p} fixed in dimension {state.reduced.dim}")
    return SubspaceBasis(cols=state.chosen)
