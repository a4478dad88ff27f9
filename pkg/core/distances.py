import logging
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg, optimize

from core.errors import IllConditionedError
from core.model import Basis, GaussianPair, WhitenedPair, basis_matrix

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-12
S_XATOL = 1e-10


class SpectralFrame(NamedTuple):
    """
    Joint diagonalization of a projected pair.

    With A0 = E^T S0 E, A1 = E^T S1 E and Q Lambda Q^T the eigendecomposition of
    A0^{-1/2} A1 A0^{-1/2}, transform = Q^T A0^{-1/2} maps A0 to I and A1 to Lambda.
    """

    eigvals: np.ndarray
    transform: np.ndarray


class ChernoffResult(NamedTuple):
    value: float
    s_star: float


def sym_eigh(matrix: np.ndarray, name: str = "matrix") -> tuple[np.ndarray, np.ndarray]:
    """
    Symmetric eigendecomposition with the relative eigenvalue floor.

    Args:
        matrix (np.ndarray): Symmetric positive definite matrix.
        name (str): Name used in the error message.

    Returns:
        tuple[np.ndarray, np.ndarray]: Ascending eigenvalues and eigenvectors.

    Raises:
        IllConditionedError: If the smallest eigenvalue is below 1e-12 times the largest.
    """
    w, V = linalg.eigh(0.5 * (matrix + matrix.T))
    if w[-1] <= 0 or w[0] < EIG_FLOOR * w[-1]:
        raise IllConditionedError(
            f"{name} is numerically singular (eigenvalues {w[0]:.3e} .. {w[-1]:.3e})"
        )
    return w, V


def sqrtm_pd(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    w, V = sym_eigh(matrix, name)
    return (V * np.sqrt(w)) @ V.T


def inv_sqrtm_pd(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    w, V = sym_eigh(matrix, name)
    return (V / np.sqrt(w)) @ V.T


def projected_arrays(pair: GaussianPair, basis: Optional[Basis] = None):
    """Returns (E^T (m1 - m0), E^T S0 E, E^T S1 E) as plain arrays."""
    if basis is None:
        return pair.delta, np.array(pair.S0), np.array(pair.S1)
    E = basis_matrix(basis, pair.dim)
    A0 = E.T @ pair.S0 @ E
    A1 = E.T @ pair.S1 @ E
    return E.T @ pair.delta, 0.5 * (A0 + A0.T), 0.5 * (A1 + A1.T)


def spectral_frame(A0: np.ndarray, A1: np.ndarray) -> SpectralFrame:
    W0 = inv_sqrtm_pd(A0, "projected S0")
    B = W0 @ A1 @ W0
    lam, Q = linalg.eigh(0.5 * (B + B.T))
    if lam[0] <= 0:
        raise IllConditionedError("projected S1 lost positive definiteness")
    return SpectralFrame(eigvals=lam, transform=Q.T @ W0)


def project_pair(pair: GaussianPair, basis: Basis) -> GaussianPair:
    """
    Projects both distributions through y = E^T x.

    Args:
        pair (GaussianPair): The n-dimensional pair.
        basis (SubspaceBasis | SelectionMatrix | np.ndarray): The n x p projection E.

    Returns:
        GaussianPair: (E^T m0, E^T m1, E^T S0 E, E^T S1 E).

    Raises:
        DimensionMismatchError: If E does not have n rows.
        IllConditionedError: If a projected covariance is numerically singular.
    """
    E = basis_matrix(basis, pair.dim)
    _, A0, A1 = projected_arrays(pair, E)
    sym_eigh(A0, "projected S0")
    sym_eigh(A1, "projected S1")
    return GaussianPair(m0=E.T @ pair.m0, m1=E.T @ pair.m1, S0=A0, S1=A1)


def kl_from_spectrum(lam: np.ndarray, z: np.ndarray) -> float:
    value = 0.5 * float(np.sum(z**2 + lam - np.log(lam) - 1.0))
    return max(value, 0.0)


def chernoff_from_spectrum(s: float, lam: np.ndarray, z: np.ndarray) -> float:
    if s <= 0.0 or s >= 1.0:
        return 0.0
    blend = s + (1.0 - s) * lam
    mean_term = s * (1.0 - s) * float(np.sum(z**2 / blend))
    log_term = float(np.sum((1.0 - s) * np.log(lam) - np.log(blend)))
    return 0.5 * (mean_term - log_term)


def maximize_over_s(objective, xatol: float = S_XATOL) -> ChernoffResult:
    """
    Maximizes a concave function of s on [0, 1] by bounded scalar search.

    Returns s = 0.5 when the best value found is not positive.
    """
    result = optimize.minimize_scalar(
        lambda s: -objective(s), bounds=(0.0, 1.0), method="bounded",
        options={"xatol": xatol},
    )
    value = -float(result.fun)
    if value <= 0.0:
        return ChernoffResult(value=0.0, s_star=0.5)
    return ChernoffResult(value=value, s_star=float(result.x))


def chernoff_from_frame(lam: np.ndarray, z: np.ndarray) -> ChernoffResult:
    if np.max(np.abs(lam - 1.0)) <= EIG_FLOOR and float(z @ z) <= EIG_FLOOR**2:
        return ChernoffResult(value=0.0, s_star=0.5)
    return maximize_over_s(lambda s: chernoff_from_spectrum(s, lam, z))


def kl_distance(pair: GaussianPair, basis: Optional[Basis] = None) -> float:
    """
    Kullback-Leibler divergence of the projected hypothesis-1 law from the hypothesis-0 law.

    Args:
        pair (GaussianPair): The n-dimensional pair.
        basis (SubspaceBasis | SelectionMatrix | np.ndarray, optional): Projection E.
            Defaults to the identity.

    Returns:
        float: 1/2 [d^T A0^{-1} d + tr(A0^{-1} A1) - log(|A1|/|A0|) - p], clipped at 0.
    """
    d, A0, A1 = projected_arrays(pair, basis)
    frame = spectral_frame(A0, A1)
    return kl_from_spectrum(frame.eigvals, frame.transform @ d)


def chernoff_objective(s: float, pair: GaussianPair, basis: Optional[Basis] = None) -> float:
    """
    Chernoff s-divergence of the projected pair.

    Args:
        s (float): Exponent in [0, 1].
        pair (GaussianPair): The n-dimensional pair.
        basis (SubspaceBasis | SelectionMatrix | np.ndarray, optional): Projection E.

    Returns:
        float: 1/2 {s(1-s) d^T (s A0 + (1-s) A1)^{-1} d
            - log(|A0|^s |A1|^{1-s} / |s A0 + (1-s) A1|)}.

    Raises:
        ValueError: If s lies outside [0, 1].
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s must lie in [0, 1], got {s}")
    d, A0, A1 = projected_arrays(pair, basis)
    frame = spectral_frame(A0, A1)
    return chernoff_from_spectrum(s, frame.eigvals, frame.transform @ d)


def chernoff_distance(pair: GaussianPair, basis: Optional[Basis] = None) -> ChernoffResult:
    """
    Chernoff distance: the maximum of chernoff_objective over s in [0, 1].

    Returns:
        ChernoffResult: The value and the maximizing s (0.5 when the value is 0).
    """
    d, A0, A1 = projected_arrays(pair, basis)
    frame = spectral_frame(A0, A1)
    return chernoff_from_frame(frame.eigvals, frame.transform @ d)


def whiten(pair: GaussianPair) -> WhitenedPair:
    """
    Reduces the pair to identity-versus-S form.

    Raises:
        IllConditionedError: If S0 is numerically singular.
    """
    W0 = inv_sqrtm_pd(np.asarray(pair.S0), "S0")
    S = W0 @ pair.S1 @ W0
    return WhitenedPair(S=0.5 * (S + S.T), m=W0 @ pair.delta)
