"""Frame and segment level evaluation of per-frame label sequences.

Background (class 0) counts toward frame accuracy only. F1@tau, the edit
score and mAP@mid look at action segments alone.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import UsageError

BACKGROUND = 0
F1_THRESHOLDS = (10, 25, 50)


@dataclass(frozen=True)
class SegmentTimeline:
    segments: tuple
    total_frames: int

    def __post_init__(self):
        pos = 0
        prev = None
        for start, end, cls in self.segments:
            if start != pos or end <= start:
                raise UsageError(f"segments must tile [0, {self.total_frames}) without gaps; "
                                 f"got ({start}, {end}) at frame {pos}")
            if cls == prev:
                raise UsageError(f"adjacent segments share class {cls}; runs must be maximal")
            pos, prev = end, cls
        if pos != self.total_frames:
            raise UsageError(f"segments end at {pos}, expected {self.total_frames}")

    def __len__(self):
        return len(self.segments)

    def classes(self):
        return [c for _, _, c in self.segments]


@dataclass(frozen=True)
class Detection:
    start: int
    end: int
    cls: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.end <= self.start:
            raise UsageError(f"detection end {self.end} must exceed start {self.start}")

    @property
    def midpoint(self):
        return (self.start + self.end) // 2


def labels_to_segments(labels):
    """Run-length encode per-frame labels into maximal (start, end, class) runs."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise UsageError("cannot segment an empty label sequence")
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [labels.size]])
    segs = tuple((int(s), int(e), int(labels[s])) for s, e in zip(starts, ends))
    return SegmentTimeline(segs, int(labels.size))


def segments_to_labels(timeline):
    out = np.empty(timeline.total_frames, dtype=np.int64)
    for s, e, c in timeline.segments:
        out[s:e] = c
    return out


def _as_timeline(x):
    return x if isinstance(x, SegmentTimeline) else labels_to_segments(x)


def action_segments(x, background=BACKGROUND):
    return [seg for seg in _as_timeline(x).segments if seg[2] != background]


def frame_accuracy(pred, truth):
    pred, truth = np.asarray(pred).reshape(-1), np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise UsageError(f"prediction has {pred.size} frames, truth has {truth.size}")
    if truth.size == 0:
        raise UsageError("no frames to score")
    return 100.0 * float(np.mean(pred == truth))


def segment_iou(a, b):
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


def f1_counts(pred, truth, tau, background=BACKGROUND):
    """(tp, fp, fn) under greedy matching in prediction order."""
    if not 0.0 < tau <= 1.0:
        raise UsageError(f"overlap threshold must lie in (0, 1], got {tau}")
    p_segs = action_segments(pred, background)
    t_segs = action_segments(truth, background)
    used = [False] * len(t_segs)
    tp = fp = 0
    for ps in p_segs:
        best, best_j = -1.0, -1
        for j, ts in enumerate(t_segs):
            if used[j] or ts[2] != ps[2]:
                continue
            iou = segment_iou(ps, ts)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= tau:
            used[best_j] = True
            tp += 1
        else:
            fp += 1
    return tp, fp, len(t_segs) - tp


def f1_from_counts(tp, fp, fn):
    if tp + fp + fn == 0:
        return 100.0
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_at_k(pred, truth, tau, background=BACKGROUND):
    """Segmental F1 at IoU threshold ``tau`` (a fraction, so F1@50 is tau=0.5)."""
    return f1_from_counts(*f1_counts(pred, truth, tau, background))


def levenshtein(a, b):
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_score(pred, truth, background=BACKGROUND):
    p = [c for _, _, c in action_segments(pred, background)]
    t = [c for _, _, c in action_segments(truth, background)]
    longest = max(len(p), len(t))
    if longest == 0:
        return 100.0
    return max(0.0, 100.0 * (1.0 - levenshtein(p, t) / longest))


def detections_from_prediction(labels, distribution=None, background=BACKGROUND):
    """Action segments of a prediction, scored by the mean probability of their class."""
    out = []
    for s, e, c in action_segments(labels, background):
        conf = 1.0 if distribution is None else float(np.mean(np.asarray(distribution)[s:e, c]))
        out.append(Detection(s, e, c, conf))
    return out


def average_precision(hits, n_truth):
    """Precision summed at every recall step of a ranked hit list, over ``n_truth``."""
    hits = np.asarray(hits, dtype=bool)
    if n_truth == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(np.sum(precision[hits]) / n_truth)


def _class_ap(cls, detections, truths, background):
    """AP for one class over sequences; detections[i] and truths[i] belong to sequence i."""
    ranked = []
    for seq, dets in enumerate(detections):
        for order, d in enumerate(dets):
            if d.cls == cls:
                ranked.append((-d.confidence, seq, order, d))
    ranked.sort(key=lambda r: r[:3])
    segs = [[ts for ts in action_segments(t, background) if ts[2] == cls] for t in truths]
    used = [[False] * len(s) for s in segs]
    hits = []
    for _, seq, _, d in ranked:
        hit = False
        for j, (s, e, _) in enumerate(segs[seq]):
            if not used[seq][j] and s <= d.midpoint < e:
                used[seq][j] = hit = True
                break
        hits.append(hit)
    return average_precision(hits, sum(len(s) for s in segs))


def map_at_mid(detections, truths, background=BACKGROUND, pooled=True, per_class=False):
    """Mean AP with the midpoint hit rule, averaged over classes present in the truth.

    ``detections`` and ``truths`` are per-sequence lists. With ``pooled`` the
    ranking runs over the whole corpus; otherwise mAP is computed per sequence
    and averaged. A corpus with no action segments scores 100 when nothing is
    detected and 0 otherwise.
    """
    if len(detections) != len(truths):
        raise UsageError(f"{len(detections)} detection lists for {len(truths)} sequences")
    if not pooled:
        scores = [map_at_mid([d], [t], background) for d, t in zip(detections, truths)]
        return float(np.mean(scores)) if scores else 100.0
    classes = sorted({c for t in truths for _, _, c in action_segments(t, background)})
    if not classes:
        any_det = any(d.cls != background for dets in detections for d in dets)
        result = 0.0 if any_det else 100.0
        return (result, {}) if per_class else result
    aps = {c: 100.0 * _class_ap(c, detections, truths, background) for c in classes}
    result = float(np.mean(list(aps.values())))
    return (result, aps) if per_class else result


@dataclass
class MetricsReport:
    frame_accuracy: float
    f1_at: dict
    edit: float
    map_mid: float
    per_class: dict = field(default_factory=dict)

    def as_dict(self):
        d = asdict(self)
        d["f1_at"] = {str(k): v for k, v in self.f1_at.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["frame_accuracy"], {int(k): v for k, v in d["f1_at"].items()}, d["edit"],
                   d["map_mid"], d.get("per_class", {}))

    def values(self):
        return [self.frame_accuracy, *self.f1_at.values(), self.edit, self.map_mid]


def evaluate_all(preds, truths, distributions=None, k=None, background=BACKGROUND, pooled=True):
    """All metrics over a corpus of aligned sequences.

    Frame accuracy pools frames, F1 pools segment counts, edit is the mean over
    sequences and mAP ranks detections corpus-wide unless ``pooled`` is off.
    """
    preds = [np.asarray(p).reshape(-1) for p in preds]
    truths = [np.asarray(t).reshape(-1) for t in truths]
    if len(preds) != len(truths) or not preds:
        raise UsageError("need the same non-zero number of predicted and true sequences")
    if distributions is None:
        distributions = [None] * len(preds)
    for p, t in zip(preds, truths):
        if p.shape != t.shape:
            raise UsageError(f"prediction has {p.size} frames, truth has {t.size}")
    all_p, all_t = np.concatenate(preds), np.concatenate(truths)
    acc = frame_accuracy(all_p, all_t)
    f1 = {}
    for th in F1_THRESHOLDS:
        counts = np.zeros(3, dtype=np.int64)
        for p, t in zip(preds, truths):
            counts += f1_counts(p, t, th / 100.0, background)
        f1[th] = f1_from_counts(*(int(c) for c in counts))
    edit = float(np.mean([edit_score(p, t, background) for p, t in zip(preds, truths)]))
    dets = [detections_from_prediction(p, d, background) for p, d in zip(preds, distributions)]
    if pooled:
        mean_ap, aps = map_at_mid(dets, truths, background, pooled=True, per_class=True)
    else:
        mean_ap, aps = map_at_mid(dets, truths, background, pooled=False), {}
    k = k if k is not None else int(max(all_p.max(), all_t.max())) + 1
    per_class = {}
    for c in range(k):
        mask = all_t == c
        entry = {"frames": int(mask.sum())}
        if mask.any():
            entry["frame_recall"] = 100.0 * float(np.mean(all_p[mask] == c))
        if c in aps:
            entry["ap_mid"] = aps[c]
        per_class[str(c)] = entry
    return MetricsReport(acc, f1, edit, mean_ap, per_class)
