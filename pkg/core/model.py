import json
import logging
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from config import ANGLE_GRID, GRID_SIZE, INTERP_COUNT, S_GRID
from core.errors import DimensionMismatchError, InvalidMatrixError

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
ORTHONORMAL_ATOL = 1e-10


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


def _parse_k(value: Any) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        value = float(value)
    value = float(value)
    if math.isnan(value) or value <= 0:
        raise ValueError(f"uncertainty size must be positive or inf, got {value}")
    return value


def _dump_k(value: float) -> Union[float, str]:
    return "inf" if math.isinf(value) else value


def check_symmetric(matrix: np.ndarray, name: str) -> np.ndarray:
    """
    Checks that a square matrix is symmetric and returns its symmetric part.

    Args:
        matrix (np.ndarray): Matrix to check.
        name (str): Name used in the error message.

    Returns:
        np.ndarray: (matrix + matrix.T) / 2.

    Raises:
        InvalidMatrixError: If the matrix is not square or not symmetric within
            the relative tolerance.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidMatrixError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise InvalidMatrixError(f"{name} is not symmetric")
    return 0.5 * (matrix + matrix.T)


class GaussianPair(BaseModel):
    """
    The two hypothesis distributions N(m0, S0) and N(m1, S1) of an n-sensor array.

    Attributes:
        m0 (np.ndarray): Mean under hypothesis 0.
        m1 (np.ndarray): Mean under hypothesis 1.
        S0 (np.ndarray): Covariance under hypothesis 0, symmetric positive definite.
        S1 (np.ndarray): Covariance under hypothesis 1, symmetric positive definite.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    m0: np.ndarray
    m1: np.ndarray
    S0: np.ndarray
    S1: np.ndarray

    @field_validator("m0", "m1", mode="before")
    @classmethod
    def validate_mean(cls, value: Any) -> np.ndarray:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if value.ndim != 1:
            raise DimensionMismatchError(f"mean must be a vector, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise InvalidMatrixError("mean has non-finite entries")
        return _frozen(value)

    @field_validator("S0", "S1", mode="before")
    @classmethod
    def validate_covariance(cls, value: Any, info: ValidationInfo) -> np.ndarray:
        value = np.atleast_2d(np.asarray(value, dtype=float))
        if not np.all(np.isfinite(value)):
            raise InvalidMatrixError(f"{info.field_name} has non-finite entries")
        value = check_symmetric(value, info.field_name)
        if np.linalg.eigvalsh(value)[0] <= 0:
            raise InvalidMatrixError(f"{info.field_name} is not positive definite")
        return _frozen(value)

    @model_validator(mode="after")
    def check_dimensions(self) -> "GaussianPair":
        n = self.m0.shape[0]
        shapes = (self.m1.shape, self.S0.shape, self.S1.shape)
        if shapes != ((n,), (n, n), (n, n)):
            raise DimensionMismatchError(
                f"inconsistent dimensions: m0 {self.m0.shape}, m1 {self.m1.shape}, "
                f"S0 {self.S0.shape}, S1 {self.S1.shape}"
            )
        return self

    @property
    def dim(self) -> int:
        return self.m0.shape[0]

    @property
    def delta(self) -> np.ndarray:
        """Mean difference m1 - m0."""
        return self.m1 - self.m0

    def swapped(self) -> "GaussianPair":
        """Returns the pair with the two hypotheses exchanged."""
        return GaussianPair(m0=self.m1, m1=self.m0, S0=self.S1, S1=self.S0)


class UncertaintyModel(BaseModel):
    """
    Sizes of the ellipsoidal mean uncertainty regions.

    The true mean under hypothesis i is only known to lie in
    {m : (m - m_i)^T S_i^{-1} (m - m_i) <= 1 / k_i}, so a larger k_i means a
    smaller region and k_i = inf means the mean is known exactly.

    Attributes:
        k0 (float): Size parameter for hypothesis 0, positive or inf.
        k1 (float): Size parameter for hypothesis 1, positive or inf.
    """

    model_config = ConfigDict(frozen=True)

    k0: float = math.inf
    k1: float = math.inf

    @field_validator("k0", "k1", mode="before")
    @classmethod
    def validate_k(cls, value: Any) -> float:
        return _parse_k(value)

    @classmethod
    def exact(cls) -> "UncertaintyModel":
        return cls(k0=math.inf, k1=math.inf)

    @property
    def is_exact(self) -> bool:
        return math.isinf(self.k0) and math.isinf(self.k1)

    @property
    def radii(self) -> tuple[float, float]:
        """Whitened drift radii 1/sqrt(k0) and 1/sqrt(k1); zero for exact means."""
        return 1.0 / math.sqrt(self.k0), 1.0 / math.sqrt(self.k1)

    def to_dict(self) -> dict:
        return {"k0": _dump_k(self.k0), "k1": _dump_k(self.k1)}


class SelectionMatrix(BaseModel):
    """
    A set of p distinct sensors out of n, stored as sorted 1-based indices.

    Equivalent to the n x p matrix E with exactly one unit entry per column.
    """

    model_config = ConfigDict(frozen=True)

    n: int
    indices: tuple[int, ...]

    @field_validator("indices", mode="before")
    @classmethod
    def sort_indices(cls, value: Any) -> tuple[int, ...]:
        return tuple(sorted(int(i) for i in value))

    @model_validator(mode="after")
    def check_indices(self) -> "SelectionMatrix":
        if not self.indices:
            raise InvalidMatrixError("selection must contain at least one sensor")
        if len(set(self.indices)) != len(self.indices):
            raise InvalidMatrixError(f"repeated sensor in {self.indices}")
        if self.indices[0] < 1 or self.indices[-1] > self.n:
            raise InvalidMatrixError(f"sensor indices {self.indices} outside [1, {self.n}]")
        return self

    @classmethod
    def from_zero_based(cls, n: int, indices) -> "SelectionMatrix":
        return cls(n=n, indices=[int(i) + 1 for i in indices])

    @property
    def p(self) -> int:
        return len(self.indices)

    @property
    def zero_based(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int) - 1

    def matrix(self) -> np.ndarray:
        """Returns the n x p 0/1 matrix E."""
        E = np.zeros((self.n, self.p))
        E[self.zero_based, np.arange(self.p)] = 1.0
        return E


class SubspaceBasis(BaseModel):
    """An n x p matrix with orthonormal columns (a point of the Stiefel manifold)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    cols: np.ndarray

    @field_validator("cols", mode="before")
    @classmethod
    def validate_cols(cls, value: Any) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if value.ndim == 1:
            value = value[:, None]
        if value.ndim != 2 or value.shape[1] < 1 or value.shape[1] > value.shape[0]:
            raise DimensionMismatchError(f"basis must be n x p with 1 <= p <= n, got {value.shape}")
        gram = value.T @ value
        if np.max(np.abs(gram - np.eye(value.shape[1]))) > ORTHONORMAL_ATOL:
            raise InvalidMatrixError("basis columns are not orthonormal")
        return _frozen(value)

    @classmethod
    def from_selection(cls, selection: SelectionMatrix) -> "SubspaceBasis":
        return cls(cols=selection.matrix())

    @property
    def n(self) -> int:
        return self.cols.shape[0]

    @property
    def p(self) -> int:
        return self.cols.shape[1]


class WhitenedPair(BaseModel):
    """
    Pair reduced to identity-versus-S form.

    Attributes:
        S (np.ndarray): S0^{-1/2} S1 S0^{-1/2}.
        m (np.ndarray): S0^{-1/2} (m1 - m0).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    S: np.ndarray
    m: np.ndarray

    @field_validator("S", "m", mode="before")
    @classmethod
    def freeze(cls, value: Any) -> np.ndarray:
        return _frozen(value)

    @property
    def M(self) -> np.ndarray:
        """Rank-one matrix m m^T."""
        return np.outer(self.m, self.m)


Basis = Union[SubspaceBasis, SelectionMatrix, np.ndarray]


def basis_matrix(basis: Basis, n: int) -> np.ndarray:
    """
    Turns any accepted basis form into an n x p matrix.

    Args:
        basis (SubspaceBasis | SelectionMatrix | np.ndarray): Projection to apply.
        n (int): Ambient dimension the basis must match.

    Returns:
        np.ndarray: The n x p matrix E.

    Raises:
        DimensionMismatchError: If the basis does not have n rows.
    """
    if isinstance(basis, SelectionMatrix):
        if basis.n != n:
            raise DimensionMismatchError(f"selection over {basis.n} sensors, pair has {n}")
        return basis.matrix()
    E = basis.cols if isinstance(basis, SubspaceBasis) else np.asarray(basis, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if E.ndim != 2 or E.shape[0] != n:
        raise DimensionMismatchError(f"basis of shape {E.shape} does not match dimension {n}")
    return E


class ProblemInstance(BaseModel):
    """
    A sensor selection problem: the pair, its mean uncertainty and the subset size.
    """

    model_config = ConfigDict(frozen=True)

    pair: GaussianPair
    uncertainty: UncertaintyModel = UncertaintyModel()
    p: int

    @model_validator(mode="after")
    def check_p(self) -> "ProblemInstance":
        if not 1 <= self.p <= self.pair.dim:
            raise DimensionMismatchError(f"p = {self.p} must lie in [1, {self.pair.dim}]")
        return self

    @property
    def n(self) -> int:
        return self.pair.dim

    def with_p(self, p: int) -> "ProblemInstance":
        return ProblemInstance(pair=self.pair, uncertainty=self.uncertainty, p=p)

    def to_dict(self) -> dict:
        """
        Converts the instance to its JSON-ready dictionary.

        Returns:
            dict: Fields n, p, m0, m1, S0, S1 (row-major nested lists), k0, k1.
        """
        return {
            "n": self.n,
            "p": self.p,
            "m0": self.pair.m0.tolist(),
            "m1": self.pair.m1.tolist(),
            "S0": self.pair.S0.tolist(),
            "S1": self.pair.S1.tolist(),
            **self.uncertainty.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        pair = GaussianPair(m0=data["m0"], m1=data["m1"], S0=data["S0"], S1=data["S1"])
        if "n" in data and int(data["n"]) != pair.dim:
            raise DimensionMismatchError(f"declared n = {data['n']} but data has dimension {pair.dim}")
        return cls(
            pair=pair,
            uncertainty=UncertaintyModel(k0=data.get("k0", "inf"), k1=data.get("k1", "inf")),
            p=int(data["p"]),
        )

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        logger.info(f"Instance n={self.n}, p={self.p} written to {path}")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ProblemInstance":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)


class Criterion(str, Enum):
    KL = "KL"
    C = "C"


class SolverParams(BaseModel):
    """
    Numerical knobs of the relaxation solvers.

    Attributes:
        grid_size (int): Number of boundary angles K.
        interp_count (int): Sub-segments J used to bridge boundary gaps.
        gap_threshold (float, optional): Absolute gap threshold; None means 1% of the
            sampled diameter.
        s_grid (int): Grid points on [0, 1] for the Chernoff exponent.
        angle_grid (int): Angles used for deflated subproblems of dimension 2.
    """

    model_config = ConfigDict(frozen=True)

    grid_size: int = Field(default=GRID_SIZE, ge=4)
    interp_count: int = Field(default=INTERP_COUNT, ge=1)
    gap_threshold: Optional[float] = Field(default=None, gt=0)
    s_grid: int = Field(default=S_GRID, ge=3)
    angle_grid: int = Field(default=ANGLE_GRID, ge=8)
