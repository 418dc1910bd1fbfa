"""Subject-level stratified cross-validation and the Acc/Sen/Spe metric suite."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, WindowSpec
from .dataio import TimeSeriesRecord, make_windows
from .trainkit import codebook_hash, predict_proba, save_checkpoint, train_classifier, train_tokenizer

log = logging.getLogger(__name__)


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]
    seed: int

    def test_subjects(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]

    def train_subjects(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f != fold]


def stratified_kfold(records, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deal each class's shuffled subjects round-robin over the folds.

    Dealing continues across classes from where the previous class stopped,
    so fold sizes differ by at most one and every fold's class count is the
    floor or ceiling of (class size / k).
    """
    pairs = [(r.subject_id, r.label) if isinstance(r, TimeSeriesRecord) else tuple(r) for r in records]
    ids = [s for s, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    by_class: dict[int, list[str]] = {}
    for sid, lab in pairs:
        by_class.setdefault(int(lab), []).append(sid)
    for lab, subs in by_class.items():
        if len(subs) < k:
            raise ValueError(f"class {lab} has {len(subs)} subjects, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    pos = 0
    for lab in sorted(by_class):
        subs = sorted(by_class[lab])
        for sid in (subs[i] for i in rng.permutation(len(subs))):
            assignments[sid] = pos % k
            pos += 1
    return FoldPlan(k, {s: assignments[s] for s in ids}, seed)


@dataclass
class MetricReport:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0


def confusion_metrics(preds, labels, positive: int = 1) -> MetricReport:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("no predictions")
    p, y = preds == positive, labels == positive
    tp, fn = int(np.sum(p & y)), int(np.sum(~p & y))
    tn, fp = int(np.sum(~p & ~y)), int(np.sum(p & ~y))
    sen = tp / (tp + fn) if tp + fn else None
    spe = tn / (tn + fp) if tn + fp else None
    return MetricReport((tp + tn) / preds.size, sen, spe, tp, fn, tn, fp)


@dataclass
class CVReport:
    folds: list[dict] = field(default_factory=list)

    def _values(self, key: str) -> np.ndarray:
        return np.array([f[key] for f in self.folds if f[key] is not None], dtype=np.float64)

    def mean(self, key: str) -> float:
        return float(self._values(key).mean())

    def std(self, key: str) -> float:
        # population std over folds
        return float(self._values(key).std())

    def summary(self) -> dict[str, tuple[float, float]]:
        return {k: (self.mean(k), self.std(k)) for k in ("acc", "sen", "spe")}

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "acc", "sen", "spe"])
            for f in self.folds:
                w.writerow([f["fold"], *("" if f[k] is None else repr(f[k]) for k in ("acc", "sen", "spe"))])
            w.writerow(["mean", *(repr(self.mean(k)) for k in ("acc", "sen", "spe"))])
            w.writerow(["std", *(repr(self.std(k)) for k in ("acc", "sen", "spe"))])


def subject_predictions(subject_ids, window_probs, threshold: float = 0.5) -> dict[str, tuple[float, int]]:
    """Average per-window positive probabilities per subject, then threshold."""
    acc: dict[str, list[float]] = {}
    for sid, p in zip(subject_ids, window_probs):
        acc.setdefault(sid, []).append(float(p))
    return {sid: (float(np.mean(v)), int(np.mean(v) >= threshold)) for sid, v in acc.items()}


def cross_validate(
    records: list[TimeSeriesRecord],
    cfg: TrainConfig,
    spec: WindowSpec | None = None,
    k: int = 5,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> CVReport:
    """Per fold: phase-1 and phase-2 training on the training subjects, metrics on held-out subjects."""
    spec = spec or WindowSpec(cfg.model.window)
    plan = stratified_kfold(records, k, seed)
    by_id = {r.subject_id: r for r in records}
    report = CVReport()
    for fold in range(k):
        train_ids, test_ids = plan.train_subjects(fold), plan.test_subjects(fold)
        if set(train_ids) & set(test_ids):
            raise AssertionError("subject leakage between train and test")
        train = make_windows([by_id[s] for s in train_ids], spec)
        test = make_windows([by_id[s] for s in test_ids], WindowSpec(spec.W))
        fold_cfg = copy.deepcopy(cfg)
        fold_cfg.seed = cfg.seed + fold
        tok = train_tokenizer(train, fold_cfg, log_every=0)
        clf = train_classifier(tok, train, fold_cfg)
        subj = subject_predictions(test.subject_ids, predict_proba(clf, test))
        labels = {s: by_id[s].label for s in test_ids}
        m = confusion_metrics([subj[s][1] for s in test_ids], [labels[s] for s in test_ids])
        row = {
            "fold": fold, "acc": m.accuracy, "sen": m.sensitivity, "spe": m.specificity,
            "train_subjects": sorted(set(train.subject_ids)), "test_subjects": sorted(test_ids),
            "codebook_hash_phase1": codebook_hash(tok.model_state),
            "codebook_hash_phase2": codebook_hash(clf.model_state),
        }
        report.folds.append(row)
        log.info("fold %d acc %.3f sen %s spe %s", fold, m.accuracy, m.sensitivity, m.specificity)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(clf, out / f"fold{fold}.hst")
    return report


def reconstruction_metrics(X: np.ndarray, X_hat: np.ndarray) -> dict[str, float]:
    """Pearson r per window (over all W x M entries) averaged over windows, and mean-reduced MSE."""
    X, X_hat = np.asarray(X, dtype=np.float64), np.asarray(X_hat, dtype=np.float64)
    a = X.reshape(len(X), -1)
    b = X_hat.reshape(len(X_hat), -1)
    a = a - a.mean(1, keepdims=True)
    b = b - b.mean(1, keepdims=True)
    denom = np.sqrt((a ** 2).sum(1) * (b ** 2).sum(1))
    r = np.where(denom > 0, (a * b).sum(1) / np.where(denom > 0, denom, 1.0), 0.0)
    return {"r": float(r.mean()), "mse": float(np.mean((X - X_hat) ** 2))}
