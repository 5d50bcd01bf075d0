"""External clustering validation: misclassification rate, adjusted Rand
index, adjusted mutual information.

All three are label-permutation invariant. Labels are arbitrary integers
(gaps allowed); the two partitions being compared must have equal length.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

__all__ = [
    "contingency_table",
    "misclassification_rate",
    "adjusted_rand_index",
    "adjusted_mutual_information",
]


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=int).ravel()
    truth = np.asarray(truth, dtype=int).ravel()
    if pred.size != truth.size:
        raise ValueError(
            f"label vectors differ in length: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("need at least one label")
    return pred, truth


def contingency_table(pred, truth) -> np.ndarray:
    """Counts matrix between two labelings, rows indexing predicted
    clusters and columns true ones."""
    pred, truth = _check_pair(pred, truth)
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _same_partition(pred, truth) -> bool:
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    return bool(np.all(pi == ti))


def misclassification_rate(pred, truth) -> float:
    """1 - (best achievable accuracy over cluster relabelings).

    The matching maximizes total agreement via an optimal assignment on
    the zero-padded square contingency table, so any relabeling of either
    argument gives the same value.
    """
    pred, truth = _check_pair(pred, truth)
    table = contingency_table(pred, truth)
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return 1.0 - padded[rows, cols].sum() / pred.size


def adjusted_rand_index(pred, truth) -> float:
    """Chance-adjusted pair-counting agreement in (-1, 1].

    When both partitions are degenerate (all one cluster, or all
    singletons) the adjustment denominator vanishes: the value is defined
    as 1 when the partitions are identical and 0 otherwise.
    """
    pred, truth = _check_pair(pred, truth)
    if pred.size < 2:
        raise ValueError("adjusted Rand index needs n >= 2")
    table = contingency_table(pred, truth)
    n = pred.size

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(table.astype(float)).sum()
    sum_a = comb2(table.sum(axis=1).astype(float)).sum()
    sum_b = comb2(table.sum(axis=0).astype(float)).sum()
    expected = sum_a * sum_b / comb2(n)
    maximum = 0.5 * (sum_a + sum_b)
    if abs(maximum - expected) < 1e-12:
        return 1.0 if _same_partition(pred, truth) else 0.0
    return float((index - expected) / (maximum - expected))


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _expected_mutual_information(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """Exact expectation of MI under the hypergeometric (fixed-margins)
    null, summed over all feasible cell counts."""
    emi = 0.0
    log_fact = gammaln(np.arange(n + 2) + 1.0)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                log_p = (log_fact[ai] + log_fact[bj]
                         + log_fact[n - ai] + log_fact[n - bj]
                         - log_fact[n] - log_fact[nij]
                         - log_fact[ai - nij] - log_fact[bj - nij]
                         - log_fact[n - ai - bj + nij])
                emi += (nij / n) * math.log(n * nij / (ai * bj)) * math.exp(log_p)
    return emi


def adjusted_mutual_information(pred, truth) -> float:
    """Chance-adjusted mutual information with arithmetic-mean
    normalization: (MI - E[MI]) / (mean(H(pred), H(truth)) - E[MI]).

    Degenerate denominators follow the adjusted-Rand convention: 1 for
    identical partitions, 0 otherwise.
    """
    pred, truth = _check_pair(pred, truth)
    table = contingency_table(pred, truth)
    n = pred.size
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    emi = _expected_mutual_information(a, b, n)
    h_mean = 0.5 * (_entropy(a, n) + _entropy(b, n))
    denom = h_mean - emi
    if abs(denom) < 1e-12:
        return 1.0 if _same_partition(pred, truth) else 0.0
    return float((mi - emi) / denom)
