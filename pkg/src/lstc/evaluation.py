"""Frame-level detection mAP: IoU matching, all-point AP, multi-threshold and
crowd-weighted variants, plus the CSV formats they read and write.

Precision/recall bookkeeping is done in exact rational arithmetic (counts and
crowd weights are integers), and converted to float once per reported value.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError

DEFAULT_DELTA = 0.5
CROWD_DELTAS = (0.5, 0.6, 0.75)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid normalized box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class GroundTruthRecord:
    video_id: str
    timestamp_s: int
    box: Box
    class_id: int

    @property
    def frame(self):
        return (self.video_id, self.timestamp_s)


@dataclass(frozen=True)
class DetectionRecord:
    video_id: str
    timestamp_s: int
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    @property
    def frame(self):
        return (self.video_id, self.timestamp_s)


@dataclass
class APResult:
    per_class_ap: dict
    map_value: float
    matched: int = 0
    unmatched: int = 0
    num_gt: int = 0
    delta: float = DEFAULT_DELTA
    exact: dict = field(default_factory=dict, repr=False)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def crowd_index(gts: Iterable[GroundTruthRecord]) -> dict:
    """Ground-truth person count per frame (distinct boxes; a person may carry several labels)."""
    people = defaultdict(set)
    for g in gts:
        people[g.frame].add(g.box)
    return {f: len(boxes) for f, boxes in people.items()}


def _match(dets, gts, class_id, delta):
    """Greedy matching; yields (frame, is_tp) in ranked order, plus the GT list."""
    cls_gts = [g for g in gts if g.class_id == class_id]
    by_frame = defaultdict(list)
    for idx, g in enumerate(cls_gts):
        by_frame[g.frame].append(idx)
    cls_dets = [d for d in dets if d.class_id == class_id]
    # stable sort: ties keep input order
    ranked = sorted(cls_dets, key=lambda d: -d.score)
    used = [False] * len(cls_gts)
    outcome = []
    for d in ranked:
        best, best_iou = None, -1.0
        for idx in by_frame.get(d.frame, ()):
            if used[idx]:
                continue
            o = iou(d.box, cls_gts[idx].box)
            if o >= delta and o > best_iou:
                best, best_iou = idx, o
        if best is not None:
            used[best] = True
        outcome.append((d.frame, best is not None))
    return outcome, cls_gts


def _all_point_ap(outcome, cls_gts, weights=None) -> Fraction:
    w = (lambda f: weights.get(f, 0)) if weights is not None else (lambda f: 1)
    total = sum(Fraction(max(w(g.frame), 0)) for g in cls_gts)
    if total == 0:
        return Fraction(0)
    tp = fp = Fraction(0)
    recall, precision = [], []
    for frame, hit in outcome:
        # frames without ground truth still charge false positives at weight 1
        wt = Fraction(max(w(frame), 1))
        if hit:
            tp += wt
        else:
            fp += wt
        recall.append(tp / total)
        precision.append(tp / (tp + fp))
    mrec = [Fraction(0)] + recall + [Fraction(1)]
    mpre = [Fraction(0)] + precision + [Fraction(0)]
    for i in range(len(mpre) - 2, -1, -1):
        if mpre[i + 1] > mpre[i]:
            mpre[i] = mpre[i + 1]
    ap = Fraction(0)
    for i in range(len(mrec) - 1):
        if mrec[i + 1] != mrec[i]:
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return ap


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {delta}")


def average_precision(dets, gts, class_id, delta=DEFAULT_DELTA, weights=None):
    """All-point interpolated AP for one class, or None when the class has no ground truth."""
    _check_delta(delta)
    outcome, cls_gts = _match(dets, gts, class_id, delta)
    if not cls_gts:
        return None
    return float(_all_point_ap(outcome, cls_gts, weights))


def _frame_map_exact(dets, gts, delta, class_filter, weights):
    _check_delta(delta)
    gts = list(gts)
    dets = list(dets)
    if not gts:
        raise ValueError("frame_map needs at least one ground-truth record")
    classes = sorted({g.class_id for g in gts})
    if class_filter is not None:
        allowed = set(class_filter)
        classes = [c for c in classes if c in allowed]
    if not classes:
        raise ValueError("no evaluated class has ground truth")
    per_class = {}
    matched = unmatched = num_gt = 0
    for c in classes:
        outcome, cls_gts = _match(dets, gts, c, delta)
        per_class[c] = _all_point_ap(outcome, cls_gts, weights)
        hits = sum(1 for _, h in outcome if h)
        matched += hits
        unmatched += len(outcome) - hits
        num_gt += len(cls_gts)
    mean = sum(per_class.values(), Fraction(0)) / len(per_class)
    return per_class, mean, matched, unmatched, num_gt


def frame_map(dets, gts, delta=DEFAULT_DELTA, class_filter=None, weighted=False) -> APResult:
    gts = list(gts)
    weights = crowd_index(gts) if weighted else None
    per_class, mean, matched, unmatched, num_gt = _frame_map_exact(
        dets, gts, delta, class_filter, weights)
    return APResult({c: float(v) for c, v in per_class.items()}, float(mean),
                    matched, unmatched, num_gt, delta, exact=per_class)


def _mean_over_deltas(dets, gts, deltas, class_filter, weighted):
    deltas = list(deltas)
    if not deltas:
        raise ValueError("at least one IoU threshold is required")
    gts = list(gts)
    dets = list(dets)
    weights = crowd_index(gts) if weighted else None
    total = Fraction(0)
    for delta in deltas:
        total += _frame_map_exact(dets, gts, delta, class_filter, weights)[1]
    return total / len(deltas)


def multi_threshold_map(dets, gts, deltas=CROWD_DELTAS, class_filter=None) -> float:
    return float(_mean_over_deltas(dets, gts, deltas, class_filter, weighted=False))


def weighted_map(dets, gts, deltas=CROWD_DELTAS, class_filter=None) -> float:
    """Crowd-weighted mAP: each GT and detection counts with its frame's person count."""
    return float(_mean_over_deltas(dets, gts, deltas, class_filter, weighted=True))


def evaluate(dets, gts, deltas=(DEFAULT_DELTA,), weighted=False, class_filter=None) -> dict:
    """Per-delta results and the final score, shaped for the JSON report."""
    dets, gts = list(dets), list(gts)
    per_delta = []
    for delta in deltas:
        r = frame_map(dets, gts, delta, class_filter, weighted=weighted)
        per_delta.append({
            "delta": delta,
            "map": r.map_value,
            "matched": r.matched,
            "unmatched": r.unmatched,
            "num_gt": r.num_gt,
            "per_class_ap": {str(c): v for c, v in sorted(r.per_class_ap.items())},
        })
    final = (weighted_map if weighted else multi_threshold_map)(dets, gts, deltas, class_filter)
    return {"deltas": list(deltas), "weighted": weighted, "per_delta": per_delta, "map": final}


# ---------------------------------------------------------------------------
# CSV


def _parse_rows(path, with_score):
    want = 8 if with_score else 7
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != want:
                raise FormatError(f"{path}:{lineno}: expected {want} fields, got {len(row)}")
            try:
                video = row[0]
                ts = int(row[1])
                box = Box(*(float(v) for v in row[2:6]))
                cls = int(row[6])
                if with_score:
                    out.append(DetectionRecord(video, ts, box, cls, float(row[7])))
                else:
                    out.append(GroundTruthRecord(video, ts, box, cls))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def read_detections(path) -> list:
    return _parse_rows(path, with_score=True)


def read_ground_truth(path) -> list:
    return _parse_rows(path, with_score=False)


def format_row(video_id, timestamp_s, box, class_id, score=None) -> str:
    fields = [video_id, str(int(timestamp_s))] + [f"{v:.6f}" for v in box.as_tuple()]
    fields.append(str(int(class_id)))
    if score is not None:
        fields.append(f"{score:.6f}")
    return ",".join(fields)


def write_records(records: Sequence, path):
    lines = []
    for r in records:
        score = getattr(r, "score", None)
        lines.append(format_row(r.video_id, r.timestamp_s, r.box, r.class_id, score))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_class_filter(path) -> list:
    return [int(line.split(",")[0]) for line in Path(path).read_text().splitlines() if line.strip()]


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
