"""Manifests, cross-validation plans, classification metrics and paired tests."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

LABELS = (0, 1)
MODALITIES = ("cough", "breath", "unknown")


class ManifestError(ValueError):
    pass


class StratificationError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    path: str
    label: int
    modality: str = "unknown"
    group: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"record {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if self.modality not in MODALITIES:
            raise ManifestError(f"record {self.id!r}: unknown modality {self.modality!r}")


def read_manifest(path) -> list[ManifestRecord]:
    base = Path(path).parent
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = ManifestRecord(**raw)
            except (json.JSONDecodeError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            if not Path(rec.path).is_absolute():
                rec.path = str(base / rec.path)
            records.append(rec)
    return records


def write_manifest(path, records: Sequence[ManifestRecord], relative_to=None) -> None:
    with open(path, "w") as fh:
        for r in records:
            d = asdict(r)
            if relative_to is not None:
                d["path"] = str(Path(r.path).relative_to(relative_to))
            fh.write(json.dumps(d, sort_keys=True) + "\n")


# -- fold plans ----------------------------------------------------------------


@dataclass
class Fold:
    train: list[str]
    test: list[str]
    val: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold] = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_test = int(round(n * ratios[1]))
    n_val = int(round(n * ratios[2]))
    return n - n_test - n_val, n_test, n_val


def make_cv_folds(manifest: Sequence[ManifestRecord], k: int = 10,
                  ratios: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0) -> FoldPlan:
    """Rotated, stratified train/test/validation resamplings.

    Each class is shuffled once. Fold f takes its test window starting at
    offset floor(f*n/k) of that shuffled order, followed by the validation
    window; the rest is training. Consecutive windows therefore tile the
    whole class, so every sample is tested at least once.
    """
    if len(manifest) < k:
        raise ValueError(f"need at least {k} records for {k} folds, got {len(manifest)}")
    if not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for label in LABELS:
        ids = sorted(r.id for r in manifest if r.label == label)
        if not ids:
            raise StratificationError(f"class {label} has no samples")
        by_class[label] = [ids[i] for i in rng.permutation(len(ids))]

    plan = FoldPlan(seed=seed)
    for f in range(k):
        train, test, val = [], [], []
        for ids in by_class.values():
            n = len(ids)
            _, n_test, n_val = _split_counts(n, ratios)
            start = (f * n) // k
            rolled = ids[start:] + ids[:start]
            test += rolled[:n_test]
            val += rolled[n_test:n_test + n_val]
            train += rolled[n_test + n_val:]
        plan.folds.append(Fold(sorted(train), sorted(test), sorted(val)))
    return plan


def save_fold_plan(path, plan: FoldPlan) -> None:
    Path(path).write_text(json.dumps({"seed": plan.seed, "folds": [asdict(f) for f in plan.folds]}, indent=1))


# -- metrics ---------------------------------------------------------------------


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be matching 1-D arrays")
    return s, y


def _roc_counts(scores, labels):
    s, y = _check_binary(scores, labels)
    pos, neg = int((y == 1).sum()), int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.r_[0, np.cumsum(y)[last]]
    fps = np.r_[0, last + 1 - tps[1:]]
    return np.r_[np.inf, s[last]], fps, tps, pos, neg


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, fpr, tpr); one point per distinct score plus the (0, 0) origin.

    A sample is called positive at threshold t when its score >= t.
    """
    thresholds, fps, tps, pos, neg = _roc_counts(scores, labels)
    return thresholds, fps / neg, tps / pos


def roc_auc(scores, labels) -> tuple[float, np.ndarray]:
    """Trapezoidal area under the ROC curve and the (threshold, fpr, tpr) points.

    Ties fall on one diagonal ROC segment, which is what gives them weight 1/2.
    The trapezoids are summed in integer counts before a single division, so
    the result equals the pairwise definition exactly.
    """
    thresholds, fps, tps, pos, neg = _roc_counts(scores, labels)
    twice_area = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    return twice_area / (2 * pos * neg), np.column_stack([thresholds, fps / neg, tps / pos])


@dataclass
class PRF1:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))

    def __getitem__(self, i):
        return (self.precision, self.recall, self.f1)[i]


def prf1(scores, labels, threshold: float = 0.5) -> PRF1:
    """Precision, recall, F1 for score >= threshold; empty denominators give 0 and flag."""
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    return prf1_from_counts(tp, fp, fn)


def prf1_from_counts(tp: int, fp: int, fn: int) -> PRF1:
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return PRF1(precision, recall, f1, degenerate)


METRIC_NAMES = ("auc", "precision", "recall", "f1")


@dataclass
class MetricsRow:
    fold: int
    auc: float
    precision: float
    recall: float
    f1: float
    n_test: int = 0

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def aggregate_folds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and (n-1)-denominator standard deviation."""
    v = [float(x) for x in values]
    if len(v) < 2:
        raise ValueError("aggregation needs at least two folds")
    # exact rational arithmetic: identical folds give a std of exactly 0
    return statistics.mean(v), statistics.stdev(v)


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        return {k: aggregate_folds([getattr(r, k) for r in self.rows]) for k in METRIC_NAMES}

    def table_row(self, digits: int = 2) -> str:
        """Metrics in the mean±std reporting format."""
        agg = self.aggregate()
        return " & ".join(f"{agg[k][0]:.{digits}f}±{agg[k][1]:.{digits}f}" for k in METRIC_NAMES)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", *METRIC_NAMES, "n_test"])
            for r in self.rows:
                w.writerow([r.fold, *(f"{getattr(r, k):.6f}" for k in METRIC_NAMES), r.n_test])
            if len(self.rows) >= 2:
                agg = self.aggregate()
                w.writerow(["mean±std", *(f"{agg[k][0]:.4f}±{agg[k][1]:.4f}" for k in METRIC_NAMES),
                            sum(r.n_test for r in self.rows)])

    @classmethod
    def from_csv(cls, path) -> MetricsReport:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if not rec["fold"].isdigit():
                    continue
                rows.append(MetricsRow(int(rec["fold"]), *(float(rec[k]) for k in METRIC_NAMES),
                                       n_test=int(rec["n_test"])))
        return cls(rows)


def write_roc_csv(path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in points:
            w.writerow([("inf" if math.isinf(t) else f"{t:.8f}"), f"{f:.8f}", f"{p:.8f}"])


def score_metrics(scores, labels, fold: int = 0, threshold: float = 0.5) -> tuple[MetricsRow, np.ndarray]:
    auc, points = roc_auc(scores, labels)
    p, r, f1 = prf1(scores, labels, threshold)
    return MetricsRow(fold, auc, p, r, f1, n_test=len(labels)), points


def evaluate(model, x: np.ndarray, y: np.ndarray, fold: int = 0, roc_path=None,
             threshold: float = 0.5) -> MetricsRow:
    """Score a test set with class-1 softmax probabilities and compute metrics."""
    from .training import predict_proba

    scores = predict_proba(model, np.asarray(x))
    row, points = score_metrics(scores, y, fold, threshold)
    if roc_path is not None:
        write_roc_csv(roc_path, points)
    return row


# -- Wilcoxon signed-rank -------------------------------------------------------------


@dataclass
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    method: str


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateTestError("all paired differences are zero")
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(d.size)
    sorted_abs = absd[order]
    i = 0
    while i < d.size:
        j = i
        while j + 1 < d.size and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return d, ranks


def wilcoxon_exact(a, b) -> WilcoxonResult:
    """Two-sided p from enumerating all 2^n sign assignments of the observed ranks."""
    d, ranks = _signed_ranks(a, b)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    total = ranks.sum()
    center = total / 2.0
    dev = abs(w_plus - center)
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    null = signs @ ranks
    extreme = int(np.count_nonzero(np.abs(null - center) >= dev - 1e-9))
    return WilcoxonResult(w_plus, min(1.0, extreme / 2 ** n), n, "exact")


def wilcoxon_normal(a, b) -> WilcoxonResult:
    """Normal approximation with tie-corrected variance and continuity correction."""
    d, ranks = _signed_ranks(a, b)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((counts ** 3) - counts).sum()) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(w_plus, min(1.0, 2.0 * float(ndtr(-z))), n, "normal")


def wilcoxon_signed_rank(a, b, exact_max_n: int = 12, min_n: int = 5) -> WilcoxonResult:
    """Paired two-sided test; statistic is W+, the rank sum of positive differences."""
    d, _ = _signed_ranks(a, b)
    if d.size < min_n:
        raise DegenerateTestError(f"{d.size} nonzero differences; need at least {min_n}")
    return wilcoxon_exact(a, b) if d.size <= exact_max_n else wilcoxon_normal(a, b)
