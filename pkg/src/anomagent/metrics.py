"""Generation-quality metrics over precomputed numbers.

Class probabilities and perceptual distances come from upstream networks;
these functions only apply the aggregation formulas.
"""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

ROW_SUM_TOLERANCE = 1e-9


class DegenerateRow(ValueError):
    pass


class NoEligibleCluster(ValueError):
    pass


def _prob_matrix(p: Sequence[Sequence[float]]) -> np.ndarray:
    m = np.asarray(p, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DegenerateRow("expected a non-empty n x k matrix")
    if not np.all(np.isfinite(m)) or np.any(m < 0) or np.any(m > 1):
        raise DegenerateRow("entries must lie in [0, 1]")
    for i, row in enumerate(m.tolist()):
        s = math.fsum(row)
        if abs(s - 1.0) > ROW_SUM_TOLERANCE:
            raise DegenerateRow(f"row {i} sums to {s!r}")
    return m


def inception_score(p: Sequence[Sequence[float]]) -> float:
    """exp of the mean KL(p(y|x_i) || p(y)) with p(y) the column mean, natural log.

    Evaluated in product form: row i contributes prod_j (p_ij / p_j) ** p_ij
    with p_ij / p_j written as n * p_ij / colsum_j, and the rows are combined
    by a geometric mean centred on the first row. Zero entries contribute
    nothing. This keeps the analytic extremes exact (identical rows give 1,
    k distinct one-hot rows give k) where exp(log k) would not round-trip.
    """
    m = _prob_matrix(p)
    n, k = m.shape
    colsum = np.array([math.fsum(col) for col in m.T.tolist()])
    with np.errstate(divide="ignore", invalid="ignore"):
        factors = np.where(m > 0, (m * n / colsum) ** m, 1.0).prod(axis=1)
    factors = np.maximum(factors, 1.0)  # each row KL is >= 0
    ref = float(factors[0])
    score = ref * math.exp(math.fsum(np.log(factors / ref).tolist()) / n)
    return min(max(score, 1.0), float(k))


def _cluster_items(d: Mapping[str, Sequence[float]] | Iterable[tuple[str, Sequence[float]]]):
    return d.items() if isinstance(d, Mapping) else d


def eligible(distances: Sequence[float]) -> bool:
    """True when the count is m(m-1)/2 for some member count m >= 2."""
    c = len(distances)
    if c < 1:
        return False
    m = (1 + math.isqrt(1 + 8 * c)) // 2
    return m * (m - 1) // 2 == c


def icl(
    d: Mapping[str, Sequence[float]] | Iterable[tuple[str, Sequence[float]]],
    require_complete: bool = False,
) -> float:
    """Mean over clusters of each cluster's mean pairwise distance.

    Empty clusters are skipped. With ``require_complete`` a cluster also
    needs exactly m(m-1)/2 distances for some member count m, otherwise it
    is skipped.
    """
    means = []
    for cid, dist in _cluster_items(d):
        dist = [float(x) for x in dist]
        if any(not math.isfinite(x) or x < 0 for x in dist):
            raise ValueError(f"cluster {cid!r}: distances must be finite and >= 0")
        if dist and (eligible(dist) or not require_complete):
            means.append(math.fsum(dist) / len(dist))
    if not means:
        raise NoEligibleCluster("no cluster has usable pairwise distances")
    return math.fsum(means) / len(means)
