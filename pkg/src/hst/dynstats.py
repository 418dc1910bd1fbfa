"""Token occupancy statistics, group comparison with FDR control, and
per-token activation maps."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

TOKEN_COLUMNS = ("subject_id", "t", "state_token", "transition_token",
                 "state_residual_token", "transition_residual_token")


def occupancy(tokens, K: int) -> np.ndarray:
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size == 0:
        raise ValueError("occupancy of an empty token sequence")
    if tokens.min() < 0 or tokens.max() >= K:
        raise ValueError(f"tokens outside [0, {K})")
    return np.bincount(tokens, minlength=K) / tokens.size


def _welch(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return float(np.sign(a.mean() - b.mean()) * np.inf), 0.0
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def _mannwhitney(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    if np.all(a == a[0]) and np.all(b == a[0]):
        return float(len(a) * len(b) / 2), 1.0
    res = stats.mannwhitneyu(a, b, alternative="two-sided")
    return float(res.statistic), float(res.pvalue)


def group_compare(occ_A, occ_B, test: str = "welch") -> tuple[np.ndarray, np.ndarray]:
    """Per-token two-sided test between two groups of occupancy vectors.

    Returns ``(statistic, p)`` arrays of length K.
    """
    A, B = np.atleast_2d(np.asarray(occ_A, float)), np.atleast_2d(np.asarray(occ_B, float))
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("each group needs at least 2 subjects")
    if A.shape[1] != B.shape[1]:
        raise ValueError("groups have different vocabulary sizes")
    fn = {"welch": _welch, "mannwhitney": _mannwhitney}[test]
    out = np.array([fn(A[:, j], B[:, j]) for j in range(A.shape[1])])
    return out[:, 0], out[:, 1]


def fdr_bh(pvals, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up adjustment; returns (adjusted p-values, significant flags)."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy(), np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    return adjusted, adjusted <= q


@dataclass
class GroupComparisonReport:
    vocabulary: str
    mean_A: np.ndarray
    mean_B: np.ndarray
    stat: np.ndarray
    p: np.ndarray
    q: np.ndarray
    significant: np.ndarray
    alpha: float = 0.05

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "mean_A", "mean_B", "stat", "p", "q", "significant"])
            for j in range(len(self.p)):
                w.writerow([j, repr(float(self.mean_A[j])), repr(float(self.mean_B[j])),
                            repr(float(self.stat[j])), repr(float(self.p[j])), repr(float(self.q[j])),
                            int(self.significant[j])])


def compare_occupancy(occ_A, occ_B, vocabulary: str = "state", q: float = 0.05,
                      test: str = "welch") -> GroupComparisonReport:
    A, B = np.asarray(occ_A, float), np.asarray(occ_B, float)
    stat, p = group_compare(A, B, test)
    adj, flags = fdr_bh(p, q)
    return GroupComparisonReport(vocabulary, A.mean(0), B.mean(0), stat, p, adj, flags, q)


def state_activation_map(X, tokens, token_id: int) -> np.ndarray | None:
    """Mean input vector over every time point assigned to ``token_id``.

    ``X`` is (..., M) and ``tokens`` has the matching leading shape. Returns
    None when the token never occurs.
    """
    X = np.asarray(X, dtype=np.float64)
    tokens = np.asarray(tokens)
    flat_x = X.reshape(-1, X.shape[-1])
    mask = tokens.reshape(-1) == token_id
    if not mask.any():
        return None
    return flat_x[mask].mean(axis=0)


def token_purity(tokens, true_states) -> float:
    """Fraction of time points whose token's majority true state matches their own."""
    tokens, true_states = np.asarray(tokens).ravel(), np.asarray(true_states).ravel()
    hits = 0
    for k in np.unique(tokens):
        hits += np.bincount(true_states[tokens == k]).max()
    return hits / tokens.size


# ---------------------------------------------------------------- token streams

def write_token_csv(path: str | Path, subject_ids, offsets, tokens) -> None:
    """One row per (window time point); ``t`` is the time index within the subject."""
    cols = [np.asarray(getattr(tokens, f)) for f in
            ("state_tokens", "transition_tokens", "state_residual_tokens", "transition_residual_tokens")]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TOKEN_COLUMNS)
        for i, (sid, off) in enumerate(zip(subject_ids, offsets)):
            for t in range(cols[0].shape[1]):
                w.writerow([sid, int(off) + t, *(int(c[i, t]) for c in cols)])


def read_token_csv(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """Token streams per subject, keyed by column name, ordered by t.

    Time points covered by several overlapping windows keep the row from the
    earliest window.
    """
    rows: dict[str, dict[int, list[int]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            vals = [int(r[c]) for c in TOKEN_COLUMNS[1:]]
            rows.setdefault(r["subject_id"], {}).setdefault(vals[0], vals)
    out = {}
    for sid, by_t in rows.items():
        arr = np.asarray([by_t[t] for t in sorted(by_t)], dtype=np.int64)
        out[sid] = {c: arr[:, j] for j, c in enumerate(TOKEN_COLUMNS[1:])}
    return out


def plot_comparison(report: GroupComparisonReport, path: str | Path, labels=("A", "B")) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    K = len(report.p)
    x = np.arange(K)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * K), 3))
    ax.bar(x - 0.2, report.mean_A, 0.4, label=labels[0])
    ax.bar(x + 0.2, report.mean_B, 0.4, label=labels[1])
    top = max(report.mean_A.max(), report.mean_B.max())
    for j in np.flatnonzero(report.significant):
        ax.text(j, top * 1.05, "*", ha="center")
    ax.set_xticks(x)
    ax.set_xlabel(f"{report.vocabulary} token")
    ax.set_ylabel("occupancy")
    ax.legend()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
