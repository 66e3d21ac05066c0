"""Clustering quality metrics: best-match accuracy, NMI, adjusted Rand."""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ContractError


def _as_labels(x, name):
    a = np.asarray(x)
    if a.ndim != 1:
        raise ContractError(f"{name} must be 1-d, got shape {a.shape}")
    if a.size == 0:
        raise ContractError(f"{name} is empty")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(a == np.floor(a)):
            raise ContractError(f"{name} labels must be integers")
        a = a.astype(np.int64)
    return a.astype(np.int64)


def contingency(pred, true):
    """Count matrix M[i, j] = |{pred == pi} ∩ {true == tj}| plus the
    label orderings used for the axes."""
    pred = _as_labels(pred, "pred")
    true = _as_labels(true, "true")
    if pred.shape[0] != true.shape[0]:
        raise ContractError(
            f"length mismatch: pred has {pred.shape[0]}, true has {true.shape[0]}")
    pl, pi = np.unique(pred, return_inverse=True)
    tl, ti = np.unique(true, return_inverse=True)
    m = np.zeros((pl.size, tl.size), dtype=np.int64)
    np.add.at(m, (pi, ti), 1)
    return m, pl, tl


def acc_hungarian(pred, true):
    """Best accuracy over one-to-one cluster-to-class matchings."""
    m, _, _ = contingency(pred, true)
    kmax = max(m.shape)
    padded = np.zeros((kmax, kmax), dtype=np.int64)
    padded[: m.shape[0], : m.shape[1]] = m
    rows, cols = linear_sum_assignment(-padded)
    return float(padded[rows, cols].sum()) / float(m.sum())


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pred, true):
    """Mutual information normalized by sqrt of the marginal entropies,
    natural logs. Both marginals constant -> 1.0; exactly one -> 0.0."""
    m, _, _ = contingency(pred, true)
    n = float(m.sum())
    ha = _entropy(m.sum(axis=1), n)
    hb = _entropy(m.sum(axis=0), n)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pa = m.sum(axis=1) / n
    pb = m.sum(axis=0) / n
    info = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if m[i, j] > 0:
                pij = m[i, j] / n
                info += pij * math.log(pij / (pa[i] * pb[j]))
    return float(max(info, 0.0) / math.sqrt(ha * hb))


def _comb2(x):
    return x * (x - 1) // 2


def _ari_exact(pred, true):
    """Adjusted Rand in exact rational arithmetic. Returns (value,
    degenerate); a zero adjustment denominator reports (1.0, True)."""
    m, _, _ = contingency(pred, true)
    n = int(m.sum())
    index = sum(_comb2(int(v)) for v in m.reshape(-1))
    sum_a = sum(_comb2(int(v)) for v in m.sum(axis=1))
    sum_b = sum(_comb2(int(v)) for v in m.sum(axis=0))
    pairs = _comb2(n)
    expected = Fraction(sum_a * sum_b, pairs) if pairs else Fraction(0)
    denom = Fraction(sum_a + sum_b, 2) - expected
    if denom == 0:
        return 1.0, True
    return float((Fraction(index) - expected) / denom), False


def ari(pred, true):
    return _ari_exact(pred, true)[0]


@dataclass
class MetricsReport:
    acc: float
    nmi: float
    ari: float
    n: int
    k_pred: int
    k_true: int
    ari_degenerate: bool
    contingency: np.ndarray

    def to_text(self):
        lines = [
            f"n={self.n}",
            f"k_pred={self.k_pred}",
            f"k_true={self.k_true}",
            f"acc={self.acc:.6f}",
            f"nmi={self.nmi:.6f}",
            f"ari={self.ari:.6f}",
            f"ari_degenerate={int(self.ari_degenerate)}",
        ]
        return "\n".join(lines) + "\n"

    def contingency_csv(self):
        lines = [",".join(str(v) for v in row) for row in self.contingency]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = [
            "metric,value",
            f"n,{self.n}",
            f"k_pred,{self.k_pred}",
            f"k_true,{self.k_true}",
            f"acc,{self.acc!r}",
            f"nmi,{self.nmi!r}",
            f"ari,{self.ari!r}",
            f"ari_degenerate,{int(self.ari_degenerate)}",
        ]
        return "\n".join(rows) + "\n"


def compute_metrics(pred, true):
    m, pl, tl = contingency(pred, true)
    ari_value, degenerate = _ari_exact(pred, true)
    return MetricsReport(
        acc=acc_hungarian(pred, true),
        nmi=nmi(pred, true),
        ari=ari_value,
        n=int(m.sum()),
        k_pred=int(pl.size),
        k_true=int(tl.size),
        ari_degenerate=degenerate,
        contingency=m,
    )
