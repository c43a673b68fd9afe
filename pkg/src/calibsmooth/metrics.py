"""Calibration and detection metrics over prediction records.

Records are held column-wise in :class:`PredictionSet`. Out-of-distribution
samples carry the ``OOD`` marker as their true label, which never equals a
predicted class index.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.stats import rankdata

OOD = -1
POSITIVE_KINDS = ("misclassified", "ood")


class RecordFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class PredictionRecord:
    true_label: int  # OOD for out-of-distribution samples
    predicted_label: int
    confidence: float
    probs: tuple[float, ...] | None = None

    @property
    def is_ood(self) -> bool:
        return self.true_label == OOD


@dataclass
class PredictionSet:
    true_labels: np.ndarray
    predicted: np.ndarray
    confidence: np.ndarray
    probs: np.ndarray | None = None

    def __post_init__(self):
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        n = len(self.true_labels)
        if len(self.predicted) != n or len(self.confidence) != n:
            raise ValueError("labels, predictions and confidences must have equal length")
        if np.any((self.confidence < 0) | (self.confidence > 1)) or not np.all(np.isfinite(self.confidence)):
            raise ValueError("confidences must lie in [0, 1]")
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape[0] != n:
                raise ValueError("probs row count differs from record count")

    @classmethod
    def from_probs(cls, probs, true_labels) -> "PredictionSet":
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        predicted = np.argmax(probs, axis=1)
        return cls(true_labels, predicted, probs[np.arange(len(probs)), predicted], probs)

    @classmethod
    def from_records(cls, records: list[PredictionRecord]) -> "PredictionSet":
        probs = None
        if records and all(r.probs is not None for r in records):
            probs = np.array([r.probs for r in records])
        return cls(
            np.array([r.true_label for r in records], dtype=np.int64),
            np.array([r.predicted_label for r in records], dtype=np.int64),
            np.array([r.confidence for r in records], dtype=np.float64),
            probs,
        )

    @classmethod
    def concat(cls, *sets: "PredictionSet") -> "PredictionSet":
        probs = None
        if all(s.probs is not None for s in sets):
            probs = np.concatenate([s.probs for s in sets])
        return cls(
            np.concatenate([s.true_labels for s in sets]),
            np.concatenate([s.predicted for s in sets]),
            np.concatenate([s.confidence for s in sets]),
            probs,
        )

    def __len__(self) -> int:
        return len(self.true_labels)

    def __iter__(self) -> Iterator[PredictionRecord]:
        for i in range(len(self)):
            probs = tuple(self.probs[i]) if self.probs is not None else None
            yield PredictionRecord(int(self.true_labels[i]), int(self.predicted[i]), float(self.confidence[i]), probs)

    @property
    def is_ood(self) -> np.ndarray:
        return self.true_labels == OOD

    @property
    def correct(self) -> np.ndarray:
        return (self.true_labels == self.predicted) & ~self.is_ood

    def subset(self, mask) -> "PredictionSet":
        probs = self.probs[mask] if self.probs is not None else None
        return PredictionSet(self.true_labels[mask], self.predicted[mask], self.confidence[mask], probs)

    def in_distribution(self) -> "PredictionSet":
        return self.subset(~self.is_ood)

    def accuracy(self) -> float:
        ind = ~self.is_ood
        if not np.any(ind):
            raise ValueError("no in-distribution records")
        return float(np.mean(self.correct[ind]))


# -- binning and ECE ---------------------------------------------------------


@dataclass
class BinStats:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float
    calibration_error: float


def _bin_index(confidence: np.ndarray, num_bins: int) -> np.ndarray:
    # bin m covers (edges[m], edges[m+1]]; confidence 0 joins the first bin
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    return np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, num_bins - 1)


def bin_predictions(records: PredictionSet, num_bins: int = 10, scheme: str = "equal-width") -> list[BinStats]:
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if len(records) == 0:
        raise ValueError("cannot bin an empty record set")
    conf = records.confidence
    hit = records.correct.astype(np.float64)
    if scheme == "equal-width":
        idx = _bin_index(conf, num_bins)
        groups = [np.nonzero(idx == m)[0] for m in range(num_bins)]
        bounds = [(m / num_bins, (m + 1) / num_bins) for m in range(num_bins)]
    elif scheme == "equal-mass":
        order = np.argsort(conf, kind="stable")
        groups = np.array_split(order, num_bins)
        bounds, lo = [], 0.0
        for m, g in enumerate(groups):
            hi = 1.0 if m == num_bins - 1 else (float(conf[g].max()) if len(g) else lo)
            bounds.append((lo, hi))
            lo = hi
    else:
        raise ValueError(f"unknown binning scheme {scheme!r}")
    stats = []
    for (lo, hi), g in zip(bounds, groups):
        if len(g) == 0:
            stats.append(BinStats(lo, hi, 0, math.nan, math.nan, 0.0))
            continue
        acc = float(hit[g].mean())
        mc = float(conf[g].mean())
        stats.append(BinStats(lo, hi, len(g), mc, acc, abs(acc - mc)))
    return stats


def ece(records: PredictionSet, num_bins: int = 10, scheme: str = "equal-width") -> float:
    bins = bin_predictions(records, num_bins, scheme)
    n = len(records)
    return float(sum(b.count / n * b.calibration_error for b in bins))


def confidence_histogram(records: PredictionSet, num_bins: int = 10) -> np.ndarray:
    counts = np.zeros(num_bins, dtype=np.int64)
    if len(records):
        np.add.at(counts, _bin_index(records.confidence, num_bins), 1)
    return counts


# -- detection ---------------------------------------------------------------


def _positives(records: PredictionSet, positives: str) -> np.ndarray:
    if positives == "misclassified":
        if np.any(records.is_ood):
            raise ValueError("misclassification detection takes in-distribution records only")
        return ~records.correct
    if positives == "ood":
        return records.is_ood
    raise ValueError(f"positives must be one of {POSITIVE_KINDS}")


def _f1(flagged: np.ndarray, pos: np.ndarray) -> float:
    tp = int(np.sum(flagged & pos))
    if tp == 0:
        return 0.0
    precision = tp / int(np.sum(flagged))
    recall = tp / int(np.sum(pos))
    return 2 * precision * recall / (precision + recall)


def detection_f1(records: PredictionSet, positives: str, tau: float, strict: bool = True) -> float:
    """F1 of flagging ``confidence < tau`` (``<=`` when not strict) as positive."""
    pos = _positives(records, positives)
    if not np.any(pos):
        raise ValueError(f"no {positives} records: detection task is degenerate")
    flagged = records.confidence < tau if strict else records.confidence <= tau
    return _f1(flagged, pos)


@dataclass
class CalibrationCurve:
    tau_upper: float
    num_thresholds: int
    thresholds: np.ndarray
    f1_values: np.ndarray

    @property
    def nbaucc(self) -> float:
        return float(np.mean(self.f1_values))


def calibration_curve(
    records: PredictionSet, positives: str, tau_upper: float = 0.5, num_thresholds: int = 50, strict: bool = True
) -> CalibrationCurve:
    if not 0.0 < tau_upper <= 1.0:
        raise ValueError("tau_upper must lie in (0, 1]")
    if num_thresholds < 1:
        raise ValueError("num_thresholds must be >= 1")
    pos = _positives(records, positives)
    if not np.any(pos):
        raise ValueError(f"no {positives} records: detection task is degenerate")
    # tau_upper * i / M keeps grid points like 0.9 exact
    taus = np.array([tau_upper * i / num_thresholds for i in range(1, num_thresholds + 1)])
    conf = records.confidence
    f1 = np.array([_f1(conf < t if strict else conf <= t, pos) for t in taus])
    return CalibrationCurve(tau_upper, num_thresholds, taus, f1)


def nbaucc(records: PredictionSet, positives: str, tau_upper: float = 0.5, num_thresholds: int = 50, strict: bool = True) -> float:
    """Mean detection F1 over the grid ``tau_upper * i / M``, i = 1..M."""
    return calibration_curve(records, positives, tau_upper, num_thresholds, strict).nbaucc


def auroc(records: PredictionSet, positives: str) -> float:
    """Rank AUROC with midranks, scoring each record by ``1 - confidence``."""
    pos = _positives(records, positives)
    n_pos = int(np.sum(pos))
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative records")
    ranks = rankdata(1.0 - records.confidence)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# -- report ------------------------------------------------------------------


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float
    num_bins: int
    bins: list[BinStats]
    histogram: list[int]
    nbaucc_misclassification: dict[float, float | None]
    nbaucc_ood: dict[float, float | None] = field(default_factory=dict)
    auroc_misclassification: float | None = None
    auroc_ood: float | None = None
    mean_confidence_in: float = math.nan
    mean_confidence_ood: float | None = None
    notices: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["nbaucc_misclassification"] = {str(k): v for k, v in self.nbaucc_misclassification.items()}
        out["nbaucc_ood"] = {str(k): v for k, v in self.nbaucc_ood.items()}
        # empty bins carry NaN statistics; JSON has no NaN, so emit null
        for b in out["bins"]:
            for key in ("mean_confidence", "accuracy"):
                if b[key] != b[key]:
                    b[key] = None
        return out

    def summary_rows(self) -> list[tuple[str, float | None]]:
        rows = [("accuracy", self.accuracy), (f"ece_{self.num_bins}bin", self.ece)]
        rows += [(f"nbaucc_mis@{t:g}", v) for t, v in self.nbaucc_misclassification.items()]
        rows += [(f"nbaucc_ood@{t:g}", v) for t, v in self.nbaucc_ood.items()]
        rows += [("auroc_mis", self.auroc_misclassification), ("auroc_ood", self.auroc_ood)]
        rows += [("mean_conf_in", self.mean_confidence_in), ("mean_conf_ood", self.mean_confidence_ood)]
        return rows

    def format_table(self) -> str:
        lines = []
        for name, value in self.summary_rows():
            shown = "n/a" if value is None else f"{value:.4f}"
            lines.append(f"{name:<18} {shown}")
        lines += [f"note: {n}" for n in self.notices]
        return "\n".join(lines)


def build_report(
    records: PredictionSet,
    num_bins: int = 10,
    tau_uppers=(0.5, 0.7, 1.0),
    num_thresholds: int = 50,
    scheme: str = "equal-width",
) -> CalibrationReport:
    """Evaluate a mixed record set: in-distribution records drive accuracy, ECE
    and misclassification detection; all records drive OOD detection."""
    ind = records.in_distribution()
    notices = []
    mis = {}
    auroc_mis = None
    if np.any(~ind.correct):
        mis = {t: nbaucc(ind, "misclassified", t, num_thresholds) for t in tau_uppers}
        if np.any(ind.correct):
            auroc_mis = auroc(ind, "misclassified")
    else:
        mis = {t: None for t in tau_uppers}
        notices.append("no misclassified records; misclassification metrics omitted")
    ood_scores, auroc_ood, conf_ood = {}, None, None
    if np.any(records.is_ood):
        ood_scores = {t: nbaucc(records, "ood", t, num_thresholds) for t in tau_uppers}
        auroc_ood = auroc(records, "ood")
        conf_ood = float(records.confidence[records.is_ood].mean())
    else:
        notices.append("no OOD records; OOD metrics omitted")
    return CalibrationReport(
        accuracy=ind.accuracy(),
        ece=ece(ind, num_bins, scheme),
        num_bins=num_bins,
        bins=bin_predictions(ind, num_bins, scheme),
        histogram=confidence_histogram(ind, num_bins).tolist(),
        nbaucc_misclassification=mis,
        nbaucc_ood=ood_scores,
        auroc_misclassification=auroc_mis,
        auroc_ood=auroc_ood,
        mean_confidence_in=float(ind.confidence.mean()),
        mean_confidence_ood=conf_ood,
        notices=notices,
    )


# -- record files ------------------------------------------------------------


def write_records(path, records: PredictionSet) -> None:
    """One line per record: ``label|OOD,predicted,p_1,...,p_K``."""
    if records.probs is None:
        raise ValueError("writing records requires probability vectors")
    with open(path, "w") as fh:
        for t, p, probs in zip(records.true_labels, records.predicted, records.probs):
            label = "OOD" if t == OOD else str(int(t))
            fh.write(",".join([label, str(int(p))] + [repr(float(v)) for v in probs]) + "\n")


def read_records(path) -> PredictionSet:
    path = Path(path)
    labels, preds, rows = [], [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) < 4:
                raise RecordFormatError(path, lineno, "need label, predicted label and at least two probabilities")
            try:
                label = OOD if parts[0].upper() == "OOD" else int(parts[0])
                pred = int(parts[1])
                probs = [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise RecordFormatError(path, lineno, str(exc)) from None
            if width is None:
                width = len(probs)
            elif len(probs) != width:
                raise RecordFormatError(path, lineno, f"expected {width} probabilities, got {len(probs)}")
            if label != OOD and not 0 <= label < width:
                raise RecordFormatError(path, lineno, f"label {label} outside 0..{width - 1}")
            if not 0 <= pred < width:
                raise RecordFormatError(path, lineno, f"predicted label {pred} outside 0..{width - 1}")
            if any(not 0.0 <= v <= 1.0 for v in probs) or abs(sum(probs) - 1.0) > 1e-6:
                raise RecordFormatError(path, lineno, "probabilities must lie in [0, 1] and sum to 1")
            if probs[pred] < max(probs):
                raise RecordFormatError(path, lineno, "predicted label is not an argmax of the probabilities")
            labels.append(label)
            preds.append(pred)
            rows.append(probs)
    if not rows:
        raise RecordFormatError(path, 0, "no records")
    probs = np.array(rows)
    preds = np.array(preds)
    return PredictionSet(np.array(labels), preds, probs[np.arange(len(preds)), preds], probs)
