import logging
import math
import os
from typing import Callable, NamedTuple, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import linalg, optimize
from scipy.spatial.distance import pdist

from config import GRID_SIZE, INTERP_COUNT
from core.errors import ObjectiveError
from core.model import check_symmetric

logger = logging.getLogger(__name__)

VERTEX = "vertex"
INTERPOLATED = "interpolated"
GAP_FRACTION = 0.01
RESIDUAL_TOL = 1e-6
EIG_CHUNK = 256


class RangePoint(NamedTuple):
    """
    A sampled point (v^T A v, v^T B v) of the joint numerical range.

    Attributes:
        x (float): Value of the first quadratic form.
        y (float): Value of the second quadratic form.
        t (float): Boundary parameter the point was sampled at.
        source (str): "vertex" or "interpolated".
        index (int): Position of the point in its BoundarySample.
        generator (np.ndarray | None): Unit vector generating the point, vertices only.
    """

    x: float
    y: float
    t: float
    source: str
    index: int
    generator: Optional[np.ndarray] = None


class ReconstructedGenerator(NamedTuple):
    vector: np.ndarray
    approximate: bool


class BoundarySample(BaseModel):
    """
    Ordered sample of the boundary of R(A, B).

    Vertices come from minimal eigenvectors of A cos t + B sin t on the grid
    t_k = (k - 1) 2 pi / K; interpolated points bridge gaps between consecutive
    vertices that are longer than gap_threshold.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    is_vertex: np.ndarray
    vertex_id: np.ndarray
    neighbors: np.ndarray
    generators: np.ndarray
    eigvals: np.ndarray
    grid_size: int
    interp_count: int
    gap_threshold: float

    def __len__(self) -> int:
        return self.t.shape[0]

    def point(self, index: int) -> RangePoint:
        vertex = bool(self.is_vertex[index])
        return RangePoint(
            x=float(self.x[index]),
            y=float(self.y[index]),
            t=float(self.t[index]),
            source=VERTEX if vertex else INTERPOLATED,
            index=index,
            generator=self.generators[self.vertex_id[index]] if vertex else None,
        )

    @property
    def points(self) -> list[RangePoint]:
        return [self.point(i) for i in range(len(self))]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.t,
                "x": self.x,
                "y": self.y,
                "source": np.where(self.is_vertex, VERTEX, INTERPOLATED),
            }
        )

    def dump_csv(self, path: str | os.PathLike) -> None:
        """Writes (t, x, y, source) rows for plotting."""
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Boundary sample with {len(self)} points written to {path}")


def _sign_normalize(vectors: np.ndarray) -> np.ndarray:
    """Flips each row so that its first non-negligible entry is positive."""
    mask = np.abs(vectors) > 1e-12
    first = np.argmax(mask, axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), first])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def _pick_in_eigenspace(space: np.ndarray) -> np.ndarray:
    """
    Deterministic unit vector of a multi-dimensional eigenspace.

    Projects the first canonical vector with a non-zero projection onto the
    space, which maximizes the leading absolute entries in lexicographic order.
    """
    for i in range(space.shape[0]):
        v = space @ space[i]
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm
    return space[:, 0]


def _minimal_eigenpairs(A: np.ndarray, B: np.ndarray, t: np.ndarray):
    n = A.shape[0]
    scale = np.linalg.norm(A, 2) + np.linalg.norm(B, 2)
    tie_tol = 1e-10 * max(scale, 1.0)
    lam = np.empty(t.shape[0])
    vecs = np.empty((t.shape[0], n))
    for start in range(0, t.shape[0], EIG_CHUNK):
        tt = t[start:start + EIG_CHUNK]
        C = np.cos(tt)[:, None, None] * A + np.sin(tt)[:, None, None] * B
        w, V = np.linalg.eigh(C)
        lam[start:start + len(tt)] = w[:, 0]
        vecs[start:start + len(tt)] = V[:, :, 0]
        if n > 1:
            for local in np.flatnonzero(w[:, 1] - w[:, 0] <= tie_tol):
                space = V[local][:, w[local] - w[local, 0] <= tie_tol]
                vecs[start + local] = _pick_in_eigenspace(space)
    return lam, _sign_normalize(vecs)


def boundary_sample(
    A: np.ndarray,
    B: np.ndarray,
    K: int = GRID_SIZE,
    J: int = INTERP_COUNT,
    gap_threshold: Optional[float] = None,
) -> BoundarySample:
    """
    Samples the boundary of the joint numerical range {(v^T A v, v^T B v) : |v| = 1}.

    Args:
        A (np.ndarray): Symmetric n x n matrix.
        B (np.ndarray): Symmetric n x n matrix.
        K (int): Number of grid angles.
        J (int): Number of sub-segments used to bridge a gap.
        gap_threshold (float, optional): Vertex distance above which a gap is bridged.
            Defaults to 0.01 times the diameter of the vertex cloud.

    Returns:
        BoundarySample: Vertices and interpolated points in parameter order.

    Raises:
        InvalidMatrixError: If A or B is not symmetric.
    """
    A = check_symmetric(A, "A")
    B = check_symmetric(B, "B")
    n = A.shape[0]
    t = np.arange(K) * (2.0 * math.pi / K)
    lam, vecs = _minimal_eigenpairs(A, B, t)
    xs = np.einsum("ki,ij,kj->k", vecs, A, vecs)
    ys = np.einsum("ki,ij,kj->k", vecs, B, vecs)

    if n < 3:
        logger.warning(f"Sampling a {n}-dimensional range, boundary coverage is not guaranteed")
        canon = np.eye(n)
        vecs = np.vstack([vecs, canon])
        xs = np.concatenate([xs, np.diag(A)])
        ys = np.concatenate([ys, np.diag(B)])
        lam = np.concatenate([lam, np.full(n, np.nan)])
        t = np.concatenate([t, np.full(n, 2.0 * math.pi)])

    cloud = np.column_stack([xs, ys])
    if gap_threshold is None:
        diameter = float(np.max(pdist(cloud))) if cloud.shape[0] > 1 else 0.0
        gap_threshold = GAP_FRACTION * diameter

    n_vert = xs.shape[0]
    columns = {
        "t": [t], "x": [xs], "y": [ys],
        "is_vertex": [np.ones(n_vert, dtype=bool)],
        "vertex_id": [np.arange(n_vert)],
        "neighbors": [np.full((n_vert, 2), -1)],
    }
    step = 2.0 * math.pi / K
    fractions = np.arange(1, J) / J
    for a in range(K):
        b = (a + 1) % K
        if K < 2 or np.hypot(xs[b] - xs[a], ys[b] - ys[a]) <= gap_threshold:
            continue
        columns["t"].append(t[a] + fractions * step)
        columns["x"].append(xs[a] + fractions * (xs[b] - xs[a]))
        columns["y"].append(ys[a] + fractions * (ys[b] - ys[a]))
        columns["is_vertex"].append(np.zeros(J - 1, dtype=bool))
        columns["vertex_id"].append(np.full(J - 1, -1))
        columns["neighbors"].append(np.tile([a, b], (J - 1, 1)))

    merged = {key: np.concatenate(parts) for key, parts in columns.items()}
    # vertices sort before interpolated points at equal t
    order = np.lexsort((~merged["is_vertex"], merged["t"]))
    logger.debug(
        f"Boundary sample: n={n}, K={K}, {n_vert} vertices, "
        f"{len(order) - n_vert} interpolated points"
    )
    return BoundarySample(
        t=merged["t"][order],
        x=merged["x"][order],
        y=merged["y"][order],
        is_vertex=merged["is_vertex"][order],
        vertex_id=merged["vertex_id"][order],
        neighbors=merged["neighbors"][order],
        generators=vecs,
        eigvals=lam,
        grid_size=K,
        interp_count=J,
        gap_threshold=float(gap_threshold),
    )


def maximize_over_boundary(
    sample: BoundarySample, objective: Callable[[np.ndarray, np.ndarray], np.ndarray]
) -> RangePoint:
    """
    Returns the sampled point with the largest objective value.

    Args:
        sample (BoundarySample): Non-empty boundary sample.
        objective (Callable): Vectorized function of the x and y arrays.

    Returns:
        RangePoint: The first maximizer in sample order.

    Raises:
        ObjectiveError: If the objective is non-finite at any sample point.
    """
    values = np.broadcast_to(np.asarray(objective(sample.x, sample.y), dtype=float), sample.x.shape)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise ObjectiveError(
            f"objective is not finite at ({sample.x[bad]:.6g}, {sample.y[bad]:.6g})"
        )
    return sample.point(int(np.argmax(values)))


def _residuals(A: np.ndarray, B: np.ndarray, v: np.ndarray, x: float, y: float) -> np.ndarray:
    return np.array([v @ A @ v - x, v @ B @ v - y, v @ v - 1.0])


def _bisect_on_arc(A, B, u_a, u_b, point: RangePoint, p_a, p_b) -> Optional[np.ndarray]:
    if u_a @ u_b < 0:
        u_b = -u_b
    Q, R = linalg.qr(np.column_stack([u_a, u_b]), mode="economic")
    if abs(R[1, 1]) < 1e-12:
        return None
    Q = Q * np.sign(np.diag(R))
    end = math.atan2(Q[:, 1] @ u_b, Q[:, 0] @ u_b)
    chord = p_b - p_a
    target = np.dot(np.array([point.x, point.y]) - p_a, chord) / np.dot(chord, chord)

    def progress(theta: float) -> float:
        v = Q @ np.array([math.cos(theta), math.sin(theta)])
        return np.dot(np.array([v @ A @ v, v @ B @ v]) - p_a, chord) / np.dot(chord, chord) - target

    lo, hi = (0.0, end) if end >= 0 else (end, 0.0)
    if progress(lo) * progress(hi) > 0:
        return None
    theta = optimize.brentq(progress, lo, hi, xtol=1e-14)
    return Q @ np.array([math.cos(theta), math.sin(theta)])


def reconstruct_generator(
    A: np.ndarray, B: np.ndarray, point: RangePoint, sample: BoundarySample
) -> ReconstructedGenerator:
    """
    Finds a unit vector v with v^T A v = x and v^T B v = y for a sampled point.

    Vertices return their stored eigenvector. Interpolated points are solved on
    the arc between the generators of the two adjacent vertices, then polished
    by least squares; if the residual stays above 1e-6 the nearest vertex
    generator is returned and flagged approximate.

    Args:
        A (np.ndarray): First quadratic form.
        B (np.ndarray): Second quadratic form.
        point (RangePoint): A point of sample.
        sample (BoundarySample): The sample the point came from.

    Returns:
        ReconstructedGenerator: The vector and whether it is only approximate.
    """
    if point.source == VERTEX:
        return ReconstructedGenerator(vector=np.array(point.generator), approximate=False)

    a, b = sample.neighbors[point.index]
    u_a, u_b = sample.generators[a], sample.generators[b]
    p_a = np.array([sample.x[sample.vertex_id == a][0], sample.y[sample.vertex_id == a][0]])
    p_b = np.array([sample.x[sample.vertex_id == b][0], sample.y[sample.vertex_id == b][0]])

    v = _bisect_on_arc(A, B, u_a, u_b, point, p_a, p_b)
    if v is None:
        v = u_a if np.hypot(*(p_a - [point.x, point.y])) <= np.hypot(*(p_b - [point.x, point.y])) else u_b
    if np.max(np.abs(_residuals(A, B, v, point.x, point.y))) > 1e-10:
        fit = optimize.least_squares(
            lambda w: _residuals(A, B, w, point.x, point.y), v, method="trf",
            xtol=1e-15, ftol=1e-15, gtol=1e-15,
        )
        v = fit.x / np.linalg.norm(fit.x)

    if np.max(np.abs(_residuals(A, B, v, point.x, point.y))) <= RESIDUAL_TOL:
        return ReconstructedGenerator(vector=v, approximate=False)

    nearest = a if np.hypot(*(p_a - [point.x, point.y])) <= np.hypot(*(p_b - [point.x, point.y])) else b
    logger.warning(
        f"Generator of ({point.x:.6g}, {point.y:.6g}) not reconstructed, "
        f"using vertex {nearest} instead"
    )
    return ReconstructedGenerator(vector=np.array(sample.generators[nearest]), approximate=True)
