"""Detection, occupancy and planning metrics.

AP with greedy IoU matching on oriented boxes, EPA, occupancy PR-AUC,
Soft-IoU (as printed and standard), ADE and collision rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, UndefinedMetric
from .grid import OccupancyGrid

AS_PRINTED = "as-printed"
STANDARD = "standard"
FORMULA_MODES = (AS_PRINTED, STANDARD)
DEFAULT_CR_THRESHOLD = 4.0


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    length: float
    width: float
    yaw: float

    def corners(self) -> np.ndarray:
        """Counter-clockwise corner polygon."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.x, self.y]

    @property
    def area(self) -> float:
        return self.length * self.width


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    # keep the part of `subject` left of the directed edge a->b
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return out


def convex_intersection_area(p: np.ndarray, q: np.ndarray) -> float:
    """Sutherland-Hodgman clip of convex ``p`` by convex CCW ``q``."""
    poly = [np.asarray(v, dtype=float) for v in p]
    for i in range(len(q)):
        if not poly:
            return 0.0
        poly = _clip(poly, q[i], q[(i + 1) % len(q)])
    return _polygon_area(np.array(poly)) if len(poly) >= 3 else 0.0


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width)):
        return 0.0
    inter = convex_intersection_area(a.corners(), b.corners())
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True, eq=False)
class Detection:
    box: OrientedBox
    score: float
    predictions: np.ndarray | None = None  # (modes, steps, 2)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not (self.box.length > 0 and self.box.width > 0):
            raise ValueError("box sizes must be positive")


@dataclass(frozen=True, eq=False)
class GroundTruthObject:
    box: OrientedBox
    future: np.ndarray | None = None  # (steps, 2)


@dataclass
class DetectionSet:
    detections: list
    frame_id: int | str = 0


@dataclass
class MatchResult:
    tp: list = field(default_factory=list)  # (det index, gt index, iou)
    fp: list = field(default_factory=list)
    fn: list = field(default_factory=list)
    min_fde: list = field(default_factory=list)  # aligned with tp

    @property
    def n_gt(self) -> int:
        return len(self.tp) + len(self.fn)


def _dets(dets) -> list:
    return list(dets.detections) if isinstance(dets, DetectionSet) else list(dets)


def _min_fde(det: Detection, gt: GroundTruthObject) -> float:
    if det.predictions is None or gt.future is None:
        return math.inf
    preds = np.asarray(det.predictions, dtype=float)
    end = np.asarray(gt.future, dtype=float)[-1, :2]
    return float(np.min(np.linalg.norm(preds[:, -1, :2] - end, axis=1)))


def _greedy(dets: list, gts: Sequence[GroundTruthObject], iou_threshold: float):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    flags = []
    pairs = []
    for i in order:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            iou = box_iou(dets[i].box, g.box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            pairs.append((i, best, best_iou))
            flags.append(True)
        else:
            flags.append(False)
    return order, flags, pairs, taken


def match_detections(dets, gts: Sequence[GroundTruthObject], iou_threshold: float = 0.5) -> MatchResult:
    dets = _dets(dets)
    order, flags, pairs, taken = _greedy(dets, gts, iou_threshold)
    fp = [i for i, f in zip(order, flags) if not f]
    fn = [j for j, t in enumerate(taken) if not t]
    return MatchResult(pairs, fp, fn, [_min_fde(dets[i], gts[j]) for i, j, _ in pairs])


def average_precision(dets, gts: Sequence[GroundTruthObject], iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP over the monotone precision envelope.

    With no ground truth, AP is 1 when there are also no detections, else 0.
    """
    dets = _dets(dets)
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    _, flags, _, _ = _greedy(dets, gts, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum(np.logical_not(flags))
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def epa(match: MatchResult, tau: float = 2.0, alpha: float = 0.5) -> float:
    """``(#TP with minFDE < tau - alpha * #FP) / #GT``; not clamped."""
    if match.n_gt == 0:
        raise UndefinedMetric("EPA is undefined without ground-truth objects")
    hits = sum(1 for d in match.min_fde if d < tau)
    return (hits - alpha * len(match.fp)) / match.n_gt


def _grid_values(g) -> np.ndarray:
    return g.values if isinstance(g, OccupancyGrid) else np.asarray(g, dtype=np.float64)


def occupancy_auc(pred, gt, num_thresholds: int = 100) -> float:
    """Area under the precision-recall curve over pooled cells.

    Thresholds are ``linspace(0, 1, num_thresholds)`` with ``score >= thr``
    counted positive.  Thresholds that select no cell carry no precision and are
    skipped; the curve starts at recall 0 with the precision of the
    highest-threshold valid point and is integrated with the trapezoid rule.
    """
    p = _grid_values(pred).ravel()
    g = _grid_values(gt).ravel()
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {np.shape(_grid_values(pred))} != gt shape {np.shape(_grid_values(gt))}")
    positives = float(g.sum())
    if positives == 0:
        raise UndefinedMetric("occupancy AUC is undefined when ground truth has no occupied cell")
    order = np.argsort(p, kind="stable")
    ps, gs = p[order], g[order]
    # cumulative counts from the top: cells with score >= thr
    tail_pos = np.concatenate([np.cumsum(gs[::-1])[::-1], [0.0]])
    thresholds = np.linspace(0.0, 1.0, num_thresholds)[::-1]
    starts = np.searchsorted(ps, thresholds, side="left")
    n = len(ps)
    recalls, precisions = [], []
    for s in starts:
        selected = n - s
        if selected == 0:
            continue
        tp = tail_pos[s]
        recalls.append(tp / positives)
        precisions.append(tp / selected)
    if not recalls:
        return 0.0
    r = np.concatenate([[0.0], recalls])
    pr = np.concatenate([[precisions[0]], precisions])
    return float(np.sum(np.diff(r) * 0.5 * (pr[1:] + pr[:-1])))


@dataclass
class SoftIoUReport:
    value: float
    per_step: list
    degenerate_steps: list


def soft_iou_report(pred, gt, formula_mode: str = AS_PRINTED) -> SoftIoUReport:
    """Per-step soft IoU averaged over the horizon.

    ``as-printed`` divides by ``sum(O + P + O*P)``; ``standard`` by
    ``sum(O + P - O*P)``.  A step with a zero denominator contributes 0 and is
    listed in ``degenerate_steps``.
    """
    if formula_mode not in FORMULA_MODES:
        raise ValueError(f"formula_mode must be one of {FORMULA_MODES}")
    p = _grid_values(pred)
    g = _grid_values(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != gt shape {g.shape}")
    p = p.reshape(p.shape[0], -1)
    g = g.reshape(g.shape[0], -1)
    sign = 1.0 if formula_mode == AS_PRINTED else -1.0
    per_step, degenerate = [], []
    for i in range(p.shape[0]):
        inter = float(np.sum(g[i] * p[i]))
        denom = float(np.sum(g[i] + p[i] + sign * g[i] * p[i]))
        if denom == 0.0:
            per_step.append(0.0)
            degenerate.append(i)
        else:
            per_step.append(inter / denom)
    return SoftIoUReport(float(np.mean(per_step)), per_step, degenerate)


def soft_iou(pred, gt, formula_mode: str = AS_PRINTED) -> float:
    return soft_iou_report(pred, gt, formula_mode).value


def _positions(traj) -> np.ndarray:
    if hasattr(traj, "future") and hasattr(traj, "poses"):
        return np.asarray(traj.future[:, :2], dtype=np.float64)
    a = np.asarray(traj, dtype=np.float64)
    return a[:, :2]


def ade(planned, gt) -> float:
    """Mean Euclidean distance over future steps.

    A :class:`~riskplan.planner.PlannedTrajectory` contributes its future steps;
    plain arrays are used as given.
    """
    p, g = _positions(planned), _positions(gt)
    if p.shape != g.shape:
        raise ShapeError(f"trajectory lengths differ: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[0] == 0:
        raise ShapeError("trajectories are empty")
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def min_center_distance(ego, others: Sequence) -> float:
    e = _positions(ego)
    best = math.inf
    for o in others:
        op = _positions(o)
        if op.shape != e.shape:
            raise ShapeError("trajectories must share a time base")
        best = min(best, float(np.min(np.linalg.norm(e - op, axis=1))))
    return best


def collision_rate(planned_set: Sequence, others_set: Sequence[Sequence],
                   threshold: float = DEFAULT_CR_THRESHOLD) -> float:
    """Fraction of scenarios whose ego plan comes closer than ``threshold`` to any other vehicle."""
    if len(planned_set) == 0:
        raise UndefinedMetric("collision rate needs at least one scenario")
    if len(planned_set) != len(others_set):
        raise ShapeError("planned and others sets must align per scenario")
    hits = sum(1 for ego, others in zip(planned_set, others_set) if min_center_distance(ego, others) < threshold)
    return hits / len(planned_set)
