import logging
import math
from enum import Enum
from typing import Optional

import numpy as np

from config import DRIFT_FRACTION
from core.model import GaussianPair, ProblemInstance, UncertaintyModel

logger = logging.getLogger(__name__)


class KRule(str, Enum):
    INFINITY = "infinity"
    EXPLICIT = "explicit"
    DRIFT = "drift"
    DETERMINANT = "paper-det"

    @classmethod
    def _missing_(cls, value: object) -> Optional["KRule"]:
        # short spelling of the determinant rule
        return cls.DETERMINANT if value == "det" else None


def uncertainty_from_rule(
    pair: GaussianPair,
    rule: KRule,
    fraction: float = DRIFT_FRACTION,
    k_values: Optional[tuple[float, float]] = None,
) -> UncertaintyModel:
    """
    Sizes the mean uncertainty ellipsoids of a pair.

    Args:
        pair (GaussianPair): Nominal pair.
        rule (KRule): infinity (exact means), explicit (k_values), drift
            (k_i = lambda_max(S_i) / (fraction |m1 - m0|)^2, so no drift exceeds
            fraction |m1 - m0| in Euclidean norm) or paper-det, also
            accepted as det (determinant in place of lambda_max).
        fraction (float): Drift fraction of the mean gap.
        k_values (tuple[float, float], optional): k0 and k1 for the explicit rule.

    Returns:
        UncertaintyModel: The sizes.
    """
    rule = KRule(rule)
    if rule is KRule.INFINITY:
        return UncertaintyModel.exact()
    if rule is KRule.EXPLICIT:
        if k_values is None:
            raise ValueError("explicit k-rule needs k0 and k1")
        return UncertaintyModel(k0=k_values[0], k1=k_values[1])

    budget = (fraction * np.linalg.norm(pair.delta)) ** 2
    if budget == 0.0:
        return UncertaintyModel.exact()
    if rule is KRule.DRIFT:
        sizes = [np.linalg.eigvalsh(S)[-1] / budget for S in (pair.S0, pair.S1)]
    else:
        sizes = []
        for S in (pair.S0, pair.S1):
            _, logdet = np.linalg.slogdet(S)
            sizes.append(math.exp(min(logdet - math.log(budget), 700.0)))
    return UncertaintyModel(k0=sizes[0], k1=sizes[1])


def generate_instance(
    n: int,
    seed: int,
    k_rule: KRule = KRule.INFINITY,
    p: int = 1,
    fraction: float = DRIFT_FRACTION,
    k_values: Optional[tuple[float, float]] = None,
) -> ProblemInstance:
    """
    Random instance: standard normal means and covariances A A^T + 0.1 n I.

    Args:
        n (int): Number of sensors.
        seed (int): Seed; equal seeds give equal instances.
        k_rule (KRule): How the uncertainty sizes are set.
        p (int): Subset size stored in the instance.
        fraction (float): Drift fraction for the drift-based rules.
        k_values (tuple[float, float], optional): k0 and k1 for the explicit rule.

    Returns:
        ProblemInstance: The generated instance.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    m0 = rng.standard_normal(n)
    m1 = rng.standard_normal(n)
    covariances = []
    for _ in range(2):
        A = rng.standard_normal((n, n))
        S = A @ A.T + 0.1 * n * np.eye(n)
        covariances.append(0.5 * (S + S.T))
    pair = GaussianPair(m0=m0, m1=m1, S0=covariances[0], S1=covariances[1])
    uncertainty = uncertainty_from_rule(pair, k_rule, fraction, k_values)
    return ProblemInstance(pair=pair, uncertainty=uncertainty, p=p)


def instance_seeds(seed: int, count: int) -> list[int]:
    """Independent per-instance seeds derived from the run seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def instance_suite(
    n: int,
    p: int,
    count: int,
    seed: int,
    k_rule: KRule = KRule.INFINITY,
    fraction: float = DRIFT_FRACTION,
    k_values: Optional[tuple[float, float]] = None,
) -> list[tuple[int, ProblemInstance]]:
    return [
        (s, generate_instance(n, s, k_rule, p, fraction, k_values))
        for s in instance_seeds(seed, count)
    ]
