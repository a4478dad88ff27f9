import itertools
import logging
import math
import os
from typing import NamedTuple, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import linalg

from config import MC_BLOCK, ORACLE_CAP, PE_TRIALS, ROC_THRESHOLDS, ROC_TRIALS
from core.distances import projected_arrays
from core.errors import OracleCapExceededError
from core.model import Basis, Criterion, GaussianPair, ProblemInstance, SelectionMatrix, basis_matrix
from models.rounding import worst_case_value

logger = logging.getLogger(__name__)


class OracleResult(NamedTuple):
    """
    Exhaustive search outcome.

    Attributes:
        selection (SelectionMatrix): Best subset, lowest in lexicographic order on ties.
        value (float): Its worst-case criterion.
        values (np.ndarray): Criterion of every subset in lexicographic order.
    """

    selection: SelectionMatrix
    value: float
    values: np.ndarray


def all_selections(n: int, p: int) -> list[SelectionMatrix]:
    return [SelectionMatrix(n=n, indices=[i + 1 for i in combo]) for combo in itertools.combinations(range(n), p)]


def exhaustive_opt(
    instance: ProblemInstance,
    criterion: Criterion = Criterion.KL,
    cap: int = ORACLE_CAP,
) -> OracleResult:
    """
    Evaluates every p-subset of sensors.

    Args:
        instance (ProblemInstance): Instance to solve.
        criterion (Criterion): KL or C, worst case over the instance uncertainty.
        cap (int): Largest number of subsets allowed.

    Returns:
        OracleResult: The optimum and the values of all subsets.

    Raises:
        OracleCapExceededError: If C(n, p) exceeds cap.
    """
    n, p = instance.n, instance.p
    count = math.comb(n, p)
    if count > cap:
        raise OracleCapExceededError(n, p, count, cap)
    logger.debug(f"Exhaustive search over {count} subsets of {p} out of {n}")
    values = np.empty(count)
    best, best_value = None, -np.inf
    for k, combo in enumerate(itertools.combinations(range(n), p)):
        selection = SelectionMatrix.from_zero_based(n, combo)
        values[k] = worst_case_value(selection, instance.pair, instance.uncertainty, criterion)
        if values[k] > best_value:
            best, best_value = selection, values[k]
    return OracleResult(selection=best, value=float(best_value), values=values)


def _block_rng(seed: int, hypothesis: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(hypothesis, block))))


class LLRSamples(NamedTuple):
    under_h0: np.ndarray
    under_h1: np.ndarray


def llr_samples(
    basis: Basis,
    pair: GaussianPair,
    trials: int,
    seed: int,
    true_pair: Optional[GaussianPair] = None,
    block: int = MC_BLOCK,
) -> LLRSamples:
    """
    Log-likelihood ratios of projected samples drawn under each hypothesis.

    trials // 2 samples are drawn under H0 and the rest under H1, in seeded
    blocks: block b of hypothesis h uses PCG64 seeded by
    SeedSequence(seed, spawn_key=(h, b)), so any block schedule gives the same
    draws.

    Args:
        basis (SelectionMatrix | SubspaceBasis | np.ndarray): Sensors observed.
        pair (GaussianPair): Parameters the detector is built from.
        trials (int): Total number of samples.
        seed (int): Seed of the run.
        true_pair (GaussianPair, optional): Parameters the samples are drawn from.
            Defaults to pair.
        block (int): Samples per seeded block.

    Returns:
        LLRSamples: log f1(y) - log f0(y) under H0 and under H1.
    """
    E = basis_matrix(basis, pair.dim)
    _, A0, A1 = projected_arrays(pair, E)
    m0, m1 = E.T @ pair.m0, E.T @ pair.m1
    L0 = linalg.cholesky(A0, lower=True)
    L1 = linalg.cholesky(A1, lower=True)
    logdet0 = 2.0 * np.sum(np.log(np.diag(L0)))
    logdet1 = 2.0 * np.sum(np.log(np.diag(L1)))

    def llr(y: np.ndarray) -> np.ndarray:
        r0 = linalg.solve_triangular(L0, (y - m0).T, lower=True)
        r1 = linalg.solve_triangular(L1, (y - m1).T, lower=True)
        return 0.5 * (np.sum(r0**2, axis=0) - np.sum(r1**2, axis=0) + logdet0 - logdet1)

    source = true_pair or pair
    _, S0, S1 = projected_arrays(source, E)
    means = [E.T @ source.m0, E.T @ source.m1]
    roots = [linalg.cholesky(S0, lower=True), linalg.cholesky(S1, lower=True)]
    counts = [trials // 2, trials - trials // 2]

    out = []
    for h in (0, 1):
        chunks = []
        for b, start in enumerate(range(0, counts[h], block)):
            size = min(block, counts[h] - start)
            z = _block_rng(seed, h, b).standard_normal((size, roots[h].shape[0]))
            chunks.append(llr(means[h] + z @ roots[h].T))
        out.append(np.concatenate(chunks) if chunks else np.empty(0))
    return LLRSamples(under_h0=out[0], under_h1=out[1])


def estimate_pe(
    basis: Basis,
    pair: GaussianPair,
    trials: int = PE_TRIALS,
    seed: int = 0,
    true_pair: Optional[GaussianPair] = None,
) -> float:
    """
    Monte Carlo error rate of the zero-threshold likelihood ratio test with equal priors.

    Returns:
        float: Fraction of misclassified samples.
    """
    samples = llr_samples(basis, pair, trials, seed, true_pair)
    errors = np.count_nonzero(samples.under_h0 > 0.0) + np.count_nonzero(samples.under_h1 <= 0.0)
    return errors / trials


class DetectionStats(BaseModel):
    """
    Monte Carlo detection statistics of one selection.

    Attributes:
        pe (float): Error rate of the zero-threshold test.
        thresholds (np.ndarray): LLR thresholds, decreasing.
        pfa (np.ndarray): False alarm rate per threshold, nondecreasing.
        pd (np.ndarray): Detection rate per threshold after the running-max cleanup.
        trials (int): Total samples.
        seed (int): Seed of the run.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pe: float
    thresholds: np.ndarray
    pfa: np.ndarray
    pd: np.ndarray
    trials: int
    seed: int

    @property
    def roc(self) -> list[tuple[float, float]]:
        return list(zip(self.pfa.tolist(), self.pd.tolist()))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "pfa": self.pfa, "pd": self.pd})

    def dump_csv(self, path: str | os.PathLike) -> None:
        self.to_frame().to_csv(path, index=False)


def estimate_roc(
    basis: Basis,
    pair: GaussianPair,
    trials: int = ROC_TRIALS,
    threshold_grid: Union[int, np.ndarray] = ROC_THRESHOLDS,
    seed: int = 0,
    true_pair: Optional[GaussianPair] = None,
) -> DetectionStats:
    """
    Empirical ROC of the likelihood ratio test.

    Args:
        basis (SelectionMatrix | SubspaceBasis | np.ndarray): Sensors observed.
        pair (GaussianPair): Detector parameters.
        trials (int): Total samples, split evenly between hypotheses.
        threshold_grid (int | np.ndarray): Number of quantile-spaced thresholds over
            the pooled LLR samples, or explicit thresholds.
        seed (int): Seed of the run.
        true_pair (GaussianPair, optional): Sampling parameters, defaults to pair.

    Returns:
        DetectionStats: Pe and the cleaned ROC.
    """
    samples = llr_samples(basis, pair, trials, seed, true_pair)
    pooled = np.concatenate([samples.under_h0, samples.under_h1])
    if np.isscalar(threshold_grid):
        thresholds = np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, int(threshold_grid))))
    else:
        thresholds = np.unique(np.asarray(threshold_grid, dtype=float))
    # the infinite thresholds pin the curve to (0, 0) and (1, 1)
    thresholds = np.concatenate([[np.inf], thresholds[::-1], [-np.inf]])

    h0 = np.sort(samples.under_h0)
    h1 = np.sort(samples.under_h1)
    pfa = 1.0 - np.searchsorted(h0, thresholds, side="right") / max(h0.size, 1)
    pd_raw = 1.0 - np.searchsorted(h1, thresholds, side="right") / max(h1.size, 1)
    pd_clean = np.maximum.accumulate(pd_raw)
    errors = np.count_nonzero(samples.under_h0 > 0.0) + np.count_nonzero(samples.under_h1 <= 0.0)
    return DetectionStats(
        pe=errors / trials,
        thresholds=thresholds,
        pfa=pfa,
        pd=pd_clean,
        trials=trials,
        seed=seed,
    )


class PdEstimate(NamedTuple):
    pd: float
    clamped: bool


def interpolate_pd(stats: DetectionStats, pfa: float) -> PdEstimate:
    """
    Detection rate at a false alarm rate, piecewise linear in P_FA.

    Requests outside the sampled P_FA range are clamped to its ends and flagged.
    """
    frame = pd.DataFrame({"pfa": stats.pfa, "pd": stats.pd}).groupby("pfa", sort=True)["pd"].max()
    lo, hi = float(frame.index[0]), float(frame.index[-1])
    clamped = not lo <= pfa <= hi
    if clamped:
        logger.warning(f"P_FA {pfa} outside the sampled range [{lo:.4g}, {hi:.4g}], clamping")
    value = float(np.interp(min(max(pfa, lo), hi), frame.index.to_numpy(), frame.to_numpy()))
    return PdEstimate(pd=value, clamped=clamped)
