"""Evaluation metrics: beat/boundary F-measure, weighted chord accuracy,
partial-credit key score, frame accuracy, and tagging mAP / ROC-AUC.

Event matching uses maximum bipartite matching (Hopcroft-Karp), not greedy
assignment, because greedy matching is not always maximal. Every tolerance
and credit value lives in MetricConfig so other toolkits' conventions can be
matched bit for bit.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from melfm.annotations import IntervalAnnotation, canonical_label, parse_chord_label


@dataclass(frozen=True)
class MetricConfig:
    beat_tolerance: float = 0.07  # seconds, inclusive
    boundary_window: float = 0.5  # seconds, inclusive
    key_fifth_credit: float = 0.5
    key_relative_credit: float = 0.3
    key_parallel_credit: float = 0.2


DEFAULT_METRIC_CONFIG = MetricConfig()


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)
    config: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not (-1e-9 <= value <= 1.0 + 1e-9):
                raise ValueError(f"metric {name}={value} outside [0, 1]")
        for name, value in self.counts.items():
            if value < 0:
                raise ValueError(f"count {name}={value} negative")

    def to_json(self) -> str:
        return json.dumps(
            {"task": self.task, "metrics": self.metrics, "counts": self.counts, "config": self.config},
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        return EvalReport(d["task"], d["metrics"], d.get("counts", {}), d.get("config", {}))


def save_report(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def hopcroft_karp(adjacency: Sequence[Sequence[int]], num_right: int) -> int:
    """Maximum matching size in a bipartite graph given left-side adjacency."""
    inf = float("inf")
    num_left = len(adjacency)
    match_left = [-1] * num_left
    match_right = [-1] * num_right
    total = 0
    while True:
        dist = [inf] * num_left
        queue = deque()
        for u in range(num_left):
            if match_left[u] == -1:
                dist[u] = 0
                queue.append(u)
        found = False
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                w = match_right[v]
                if w == -1:
                    found = True
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        if not found:
            return total

        def try_augment(u: int) -> bool:
            for v in adjacency[u]:
                w = match_right[v]
                if w == -1 or (dist[w] == dist[u] + 1 and try_augment(w)):
                    match_left[u] = v
                    match_right[v] = u
                    return True
            dist[u] = inf
            return False

        for u in range(num_left):
            if match_left[u] == -1 and try_augment(u):
                total += 1


def _check_ascending(name: str, values: Sequence[float]) -> None:
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} times must be ascending")


def _event_f_measure(
    est: Sequence[float], ref: Sequence[float], tolerance: float
) -> tuple[float, dict[str, int]]:
    _check_ascending("estimated", est)
    _check_ascending("reference", ref)
    if len(est) == 0 and len(ref) == 0:
        return 1.0, {"tp": 0, "fp": 0, "fn": 0}
    adjacency = [
        [j for j, r in enumerate(ref) if abs(e - r) <= tolerance] for e in est
    ]
    tp = hopcroft_karp(adjacency, len(ref))
    fp, fn = len(est) - tp, len(ref) - tp
    precision = tp / len(est) if est else 0.0
    recall = tp / len(ref) if ref else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return f, {"tp": tp, "fp": fp, "fn": fn}


def beat_f1(
    est: Sequence[float],
    ref: Sequence[float],
    tolerance: float = DEFAULT_METRIC_CONFIG.beat_tolerance,
) -> float:
    """One-to-one matched F-measure with |e - r| <= tolerance (inclusive)."""
    f, _ = _event_f_measure(est, ref, tolerance)
    return f


def beat_f1_report(est, ref, tolerance: float = DEFAULT_METRIC_CONFIG.beat_tolerance) -> EvalReport:
    f, counts = _event_f_measure(est, ref, tolerance)
    return EvalReport("beat", {"f_measure": f}, counts, {"tolerance": tolerance})


def boundary_hr(
    est: Sequence[float],
    ref: Sequence[float],
    window: float = DEFAULT_METRIC_CONFIG.boundary_window,
) -> float:
    """Hit-rate F-measure for structural boundaries within an inclusive window."""
    f, _ = _event_f_measure(est, ref, window)
    return f


def chord_weighted_acc(est: IntervalAnnotation, ref: IntervalAnnotation) -> float:
    """Duration-weighted label accuracy of est against ref intervals."""
    ref_total = sum(e - s for s, e, _ in ref.intervals)
    if ref_total <= 0:
        raise ValueError("reference annotation has no duration")
    matched = 0.0
    for rs, re_, rl in ref.intervals:
        rl = canonical_label(rl)
        for es, ee, el in est.intervals:
            if ee <= rs or es >= re_:
                continue
            if canonical_label(el) == rl:
                matched += min(ee, re_) - max(es, rs)
    return matched / ref_total


def key_weighted_score(est: str, ref: str, cfg: MetricConfig = DEFAULT_METRIC_CONFIG) -> float:
    """Exact 1.0; fifth-above 0.5; relative 0.3; parallel 0.2; otherwise 0."""
    est_parsed = parse_chord_label(est)
    ref_parsed = parse_chord_label(ref)
    if ref_parsed is None or est_parsed is None:
        return 1.0 if est_parsed == ref_parsed else 0.0
    est_pc, est_mode = est_parsed
    ref_pc, ref_mode = ref_parsed
    if est_pc == ref_pc and est_mode == ref_mode:
        return 1.0
    if est_mode == ref_mode and est_pc == (ref_pc + 7) % 12:
        return cfg.key_fifth_credit
    if ref_mode == "maj" and est_mode == "min" and est_pc == (ref_pc + 9) % 12:
        return cfg.key_relative_credit
    if ref_mode == "min" and est_mode == "maj" and est_pc == (ref_pc + 3) % 12:
        return cfg.key_relative_credit
    if est_pc == ref_pc:
        return cfg.key_parallel_credit
    return 0.0


def frame_accuracy(est: Sequence, ref: Sequence) -> float:
    if len(est) != len(ref):
        raise ValueError(f"length mismatch: {len(est)} vs {len(ref)}")
    if len(est) == 0:
        raise ValueError("empty label sequences")
    return float(np.mean([e == r for e, r in zip(est, ref)]))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean precision at each positive's rank; descending scores, stable ties."""
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    positives = 0
    precisions = []
    for rank, is_pos in enumerate(ranked, start=1):
        if is_pos:
            positives += 1
            precisions.append(positives / rank)
    return float(np.mean(precisions))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal), computed with midranks."""
    pos = labels.astype(bool)
    num_pos, num_neg = int(pos.sum()), int((~pos).sum())
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = ranks[pos].sum()
    return float((pos_rank_sum - num_pos * (num_pos + 1) / 2.0) / (num_pos * num_neg))


def tagging_scores(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Macro-averaged (mAP, ROC-AUC) over tags; degenerate tags are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs labels {labels.shape}")
    aps, aucs = [], []
    for k in range(scores.shape[1]):
        col = labels[:, k].astype(bool)
        if not col.any() or col.all():
            warnings.warn(f"tag column {k} has a single class; skipped", stacklevel=2)
            continue
        aps.append(average_precision(scores[:, k], col))
        aucs.append(roc_auc(scores[:, k], col))
    if not aps:
        raise ValueError("no tag column had both a positive and a negative example")
    return float(np.mean(aps)), float(np.mean(aucs))
