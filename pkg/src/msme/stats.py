"""Two-sided nonparametric tests and boxplot summaries.

Exact p-values are computed from the full null distribution of the rank
statistic, built by dynamic programming over doubled (integer) midranks, so
ties are handled without approximation. Larger samples fall back to a
tie-corrected normal approximation with continuity correction, refined by
the fourth-cumulant (Edgeworth) term of the exact permutation distribution.
Both statistics are symmetric sums under the null, so the odd terms cancel
in the two-sided probability.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

WILCOXON_EXACT_MAX_N = 20
MANN_WHITNEY_EXACT_MAX_N = 12


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    n: int
    exact: bool
    degenerate: bool = False

    @property
    def stars(self) -> str:
        return significance_stars(self.pvalue)


def significance_stars(p: float) -> str:
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return "ns"


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _tie_term(ranks) -> float:
    _, counts = np.unique(ranks, return_counts=True)
    return float(((counts ** 3) - counts).sum())


def _normal_two_sided(deviation: float, sigma: float, kappa4: float = 0.0) -> float:
    """P(|S - mean| >= |deviation|) with continuity and kurtosis corrections."""
    if sigma <= 0:
        return 1.0
    z = (abs(deviation) - 0.5) / sigma
    if z <= 0:
        return 1.0
    tail = math.erfc(z / math.sqrt(2))
    gamma2 = kappa4 / sigma ** 4
    phi = math.exp(-z * z / 2) / math.sqrt(2 * math.pi)
    tail += 2 * phi * gamma2 / 24 * (z ** 3 - 3 * z)
    return min(1.0, max(0.0, tail))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------


def _signed_rank_counts(doubled: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each doubled positive-rank sum."""
    dist = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    dist[0] = 1.0
    for a in doubled:
        shifted = np.zeros_like(dist)
        shifted[a:] = dist[:len(dist) - a]
        dist = dist + shifted
    return dist


def wilcoxon_signed_rank(diffs, method: str = "auto") -> TestResult:
    """Two-sided signed-rank test on paired differences.

    Zero differences are dropped. ``method`` is ``auto`` (exact up to
    n=20), ``exact`` or ``approx``. ``statistic`` is min(W+, W-).
    """
    d = np.asarray(diffs, dtype=float).reshape(-1)
    if not np.isfinite(d).all():
        raise ContractError("differences must be finite")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return TestResult(0.0, 1.0, 0, True, degenerate=True)
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    statistic = min(w_plus, total - w_plus)
    exact = method == "exact" or (method == "auto" and n <= WILCOXON_EXACT_MAX_N)
    if method not in ("auto", "exact", "approx"):
        raise ContractError(f"unknown method {method!r}")
    if exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_counts(doubled)
        T = int(doubled.sum())
        obs = int(round(2 * w_plus))
        s = np.arange(T + 1)
        extreme = np.abs(2 * s - T) >= abs(2 * obs - T)
        p = float(counts[extreme].sum() / 2.0 ** n)
    else:
        mean = n * (n + 1) / 4
        var = n * (n + 1) * (2 * n + 1) / 24 - _tie_term(ranks) / 48
        # W+ is a sum of independent r_i * Bernoulli(1/2); each has kappa4 = -r_i^4 / 8
        kappa4 = -float((ranks ** 4).sum()) / 8
        p = _normal_two_sided(w_plus - mean, math.sqrt(max(var, 0.0)), kappa4)
    return TestResult(statistic, min(1.0, p), n, exact)


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------


def _rank_sum_counts(doubled: np.ndarray, k: int) -> np.ndarray:
    """counts[s] = number of size-k subsets whose doubled rank sum is s."""
    T = int(doubled.sum())
    dp = np.zeros((k + 1, T + 1), dtype=np.float64)
    dp[0, 0] = 1.0
    for a in doubled:
        for j in range(k, 0, -1):
            dp[j, a:] += dp[j - 1, :T + 1 - a]
    return dp[k]


def _sample_sum_kappa4(scores: np.ndarray, n: int) -> float:
    """Fourth cumulant of the sum of ``n`` scores drawn without replacement."""
    N = scores.size
    m = N - n
    if N < 4 or n == 0 or m == 0:
        return 0.0
    z = scores - scores.mean()
    mu2, mu4 = float((z ** 2).mean()), float((z ** 4).mean())
    denom = (N - 1) * (N - 2) * (N - 3)
    a = n * m * (N * (N + 1) - 6 * n * m) / denom
    b = -3 * n * m * ((N - 1) * (N * N - N - 6 * n * m) + 2 * N * n * m) / ((N - 1) * denom)
    return a * mu4 + b * mu2 * mu2


def mann_whitney_u(a, b, method: str = "auto") -> TestResult:
    """Two-sided rank-sum test for unpaired samples; ``statistic`` is U of ``a``.

    ``auto`` computes the exact null when ``len(a) + len(b) <= 12``.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ContractError("both samples must be non-empty")
    if method not in ("auto", "exact", "approx"):
        raise ContractError(f"unknown method {method!r}")
    na, nb = a.size, b.size
    N = na + nb
    ranks = midranks(np.concatenate([a, b]))
    r_a = float(ranks[:na].sum())
    u = r_a - na * (na + 1) / 2
    exact = method == "exact" or (method == "auto" and N <= MANN_WHITNEY_EXACT_MAX_N)
    if exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _rank_sum_counts(doubled, na)
        mu2 = na * (N + 1)
        obs = int(round(2 * r_a))
        s = np.arange(counts.size)
        extreme = np.abs(s - mu2) >= abs(obs - mu2)
        p = float(counts[extreme].sum() / math.comb(N, na))
    else:
        mean = na * nb / 2
        var = na * nb / 12 * ((N + 1) - _tie_term(ranks) / (N * (N - 1)))
        p = _normal_two_sided(u - mean, math.sqrt(max(var, 0.0)), _sample_sum_kappa4(ranks, na))
    return TestResult(u, min(1.0, p), N, exact)


# ---------------------------------------------------------------------------
# boxplots
# ---------------------------------------------------------------------------


def boxplot_summary(values) -> dict:
    """Quartiles (linear interpolation), 1.5 IQR whiskers, and outliers."""
    x = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if x.size == 0:
        raise ContractError("boxplot_summary needs at least one value")
    q1, q2, q3 = (float(v) for v in np.percentile(x, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    return {
        "n": int(x.size),
        "mean": float(x.mean()),
        "q1": q1,
        "median": q2,
        "q3": q3,
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(v) for v in x[(x < lo_fence) | (x > hi_fence)]],
    }
