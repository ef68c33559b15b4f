"""ISO/IEC 30107-3 error rates, dev-set EER thresholding, AUC and ACER ranking.

Polarity: a higher score means "more bona fide"; a sample is classified as
bona fide iff ``score >= threshold``. Labels are 1 for bona fide, 0 for attack.
All rates are formed from integer counts and divided once at the end.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """A rate was requested for a class with no samples."""


class IdMismatchError(ValueError):
    def __init__(self, what: str, missing: Sequence[str], extra: Sequence[str]):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(f"{what}: missing ids {self.missing}, extra ids {self.extra}")


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"{self.sample_id}: score must be finite")


@dataclass(frozen=True)
class MetricReport:
    apcer: float
    bpcer: float
    acer: float
    auc: float
    eer: float | None = None
    threshold: float | None = None
    n_attack: int = 0
    n_bonafide: int = 0

    @classmethod
    def from_rates(cls, apcer, bpcer, auc, eer=None, threshold=None, n_attack=0, n_bonafide=0) -> "MetricReport":
        """Build a report whose ACER is the mean of the given APCER and BPCER."""
        return cls(float(apcer), float(bpcer), (float(apcer) + float(bpcer)) / 2, float(auc),
                   None if eer is None else float(eer), None if threshold is None else float(threshold),
                   int(n_attack), int(n_bonafide))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (attack) or 1 (bonafide)")
    return s, y


def _rate(errors: int, total: int) -> float:
    return float(Fraction(int(errors), int(total)))


def apcer(scores, labels, threshold: float) -> float:
    """Fraction of attack samples accepted as bona fide (``score >= threshold``)."""
    s, y = _arrays(scores, labels)
    attacks = s[y == 0]
    if attacks.size == 0:
        raise UndefinedMetricError("APCER undefined: no attack samples")
    return _rate(np.count_nonzero(attacks >= threshold), attacks.size)


def bpcer(scores, labels, threshold: float) -> float:
    """Fraction of bona fide samples rejected (``score < threshold``)."""
    s, y = _arrays(scores, labels)
    bona = s[y == 1]
    if bona.size == 0:
        raise UndefinedMetricError("BPCER undefined: no bona fide samples")
    return _rate(np.count_nonzero(bona < threshold), bona.size)


def acer(apcer_value: float, bpcer_value: float) -> float:
    return (apcer_value + bpcer_value) / 2


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints of adjacent distinct scores, plus one sentinel below and one above."""
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[:-1] + u[1:]) / 2
    return np.concatenate(([u[0] - 1.0], mids, [u[-1] + 1.0]))


def _error_counts(s: np.ndarray, y: np.ndarray, thresholds: np.ndarray):
    att = np.sort(s[y == 0])
    bona = np.sort(s[y == 1])
    # attacks with score >= t ; bona fide with score < t
    n_fa = att.size - np.searchsorted(att, thresholds, side="left")
    n_fr = np.searchsorted(bona, thresholds, side="left")
    return n_fa, n_fr, att.size, bona.size


def eer_threshold(dev_scores, dev_labels) -> tuple[float, float]:
    """Threshold where APCER and BPCER are closest on the dev set.

    Ties on ``|APCER - BPCER|`` go to the smaller mean error, then to the
    smaller threshold. Returns ``(threshold, eer)`` with ``eer`` the mean of
    the two rates at that threshold.
    """
    s, y = _arrays(dev_scores, dev_labels)
    if not (y == 0).any() or not (y == 1).any():
        raise UndefinedMetricError("EER needs both classes in the dev set")
    cands = candidate_thresholds(s)
    n_fa, n_fr, n_att, n_bona = _error_counts(s, y, cands)
    # common denominator n_att*n_bona keeps the comparison in integers
    gap = np.abs(n_fa * n_bona - n_fr * n_att)
    total = n_fa * n_bona + n_fr * n_att
    order = np.lexsort((cands, total, gap))
    best = order[0]
    eer = float(Fraction(int(total[best]), 2 * n_att * n_bona))
    return float(cands[best]), eer


def auc(scores, labels) -> float:
    """Tie-corrected Mann-Whitney statistic P(bona > attack) + 0.5 P(equal)."""
    s, y = _arrays(scores, labels)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    below = np.concatenate(([0], np.cumsum(counts)[:-1]))
    # twice the 1-based midrank, kept integral
    twice_rank = 2 * below + counts + 1
    twice_rank_sum = int(twice_rank[inverse][y == 1].sum())
    return float(Fraction(twice_rank_sum - n_pos * (n_pos + 1), 2 * n_pos * n_neg))


def _align(scores: Mapping[str, float], labels: Mapping[str, int], what: str):
    missing = set(labels) - set(scores)
    extra = set(scores) - set(labels)
    if missing or extra:
        raise IdMismatchError(what, missing, extra)
    ids = sorted(labels)
    return np.array([scores[i] for i in ids], dtype=float), np.array([labels[i] for i in ids], dtype=int)


def evaluate_submission(
    dev_scores: Mapping[str, float],
    dev_labels: Mapping[str, int],
    test_scores: Mapping[str, float],
    test_labels: Mapping[str, int],
) -> MetricReport:
    """Score a test submission at the threshold fixed by the dev-set EER.

    The label maps act as the manifests: score ids must match them exactly.
    """
    ds, dy = _align(dev_scores, dev_labels, "dev submission")
    ts, ty = _align(test_scores, test_labels, "test submission")
    thr, eer = eer_threshold(ds, dy)
    a = apcer(ts, ty, thr)
    b = bpcer(ts, ty, thr)
    return MetricReport.from_rates(a, b, auc(ts, ty), eer, thr,
                                   n_attack=int((ty == 0).sum()), n_bonafide=int((ty == 1).sum()))


def evaluate_split(scores: Mapping[str, float], labels: Mapping[str, int]) -> MetricReport:
    """Metrics on one split at its own EER threshold."""
    return evaluate_submission(scores, labels, scores, labels)


def rank(reports: Mapping[str, MetricReport]) -> list[tuple[str, MetricReport]]:
    """Leaderboard order: ascending ACER, then APCER, then team name."""
    return sorted(reports.items(), key=lambda kv: (kv[1].acer, kv[1].apcer, kv[0]))


# --------------------------------------------------------------------------
# File formats


def _read_two_column_csv(text: str, header: tuple[str, str], parse) -> dict:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows or tuple(c.strip() for c in rows[0]) != header:
        raise ValueError(f"expected header {','.join(header)}")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ValueError(f"row {lineno}: expected 2 columns, got {len(row)}")
        key = row[0].strip()
        if key in out:
            raise ValueError(f"row {lineno}: duplicate id {key!r}")
        out[key] = parse(row[1].strip(), lineno)
    return out


def _parse_score(text: str, lineno: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"row {lineno}: score {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ValueError(f"row {lineno}: score {text!r} is not finite")
    return v


def _parse_label(text: str, lineno: int) -> int:
    if text not in ("0", "1"):
        raise ValueError(f"row {lineno}: label must be 0 or 1, got {text!r}")
    return int(text)


def read_scores(path: str | Path) -> dict[str, float]:
    return _read_two_column_csv(Path(path).read_text(), ("sample_id", "score"), _parse_score)


def read_labels(path: str | Path) -> dict[str, int]:
    return _read_two_column_csv(Path(path).read_text(), ("sample_id", "label"), _parse_label)


def format_scores(scores: Mapping[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "score"])
    for k, v in scores.items():
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def format_labels(labels: Mapping[str, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "label"])
    for k, v in labels.items():
        w.writerow([k, int(v)])
    return buf.getvalue()
