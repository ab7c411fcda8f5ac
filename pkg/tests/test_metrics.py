import json

import numpy as np
import pytest

from melfm import metrics as mm
from melfm.annotations import IntervalAnnotation


def brute_force_max_matching(adjacency, num_right):
    """Exhaustive search over all matchings; exact for small instances."""

    def best(u, used):
        if u == len(adjacency):
            return 0
        result = best(u + 1, used)  # leave u unmatched
        for v in adjacency[u]:
            if v not in used:
                result = max(result, 1 + best(u + 1, used | {v}))
        return result

    return best(0, frozenset())


def pairwise_auc(scores, labels):
    """O(P*N) oracle: fraction of pos/neg pairs ranked correctly, ties half."""
    pos = scores[labels.astype(bool)]
    neg = scores[~labels.astype(bool)]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def rasterized_chord_acc(est, ref, grid=0.001):
    """1 ms grid oracle for duration-weighted chord accuracy."""
    end = max(ref.duration, est.duration)
    times = np.arange(grid / 2, end, grid)
    matched = 0
    total = 0
    for t in times:
        r = ref.label_at(t)
        if r is None:
            continue
        total += 1
        if est.label_at(t) == r:
            matched += 1
    return matched / total


def test_beat_f1_perfect_and_empty():
    assert mm.beat_f1([1.0, 2.0], [1.0, 2.0]) == 1.0
    assert mm.beat_f1([], [1.0]) == 0.0
    assert mm.beat_f1([1.0], []) == 0.0
    assert mm.beat_f1([], []) == 1.0


def test_beat_f1_hand_case():
    report = mm.beat_f1_report([1.05, 2.5], [1.0, 2.0, 3.0])
    assert report.counts == {"tp": 1, "fp": 1, "fn": 2}
    assert abs(report.metrics["f_measure"] - 0.4) < 1e-12


def test_beat_f1_rejects_unsorted():
    with pytest.raises(ValueError):
        mm.beat_f1([2.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        mm.beat_f1([1.0], [2.0, 1.0])


def test_boundary_hr_hand_case_and_inclusive_window():
    assert abs(mm.boundary_hr([10.3, 25.0], [10.0, 20.0]) - 0.5) < 1e-12
    assert mm.boundary_hr([10.5], [10.0]) == 1.0  # |e-r| = 0.5 exactly counts


def test_matching_equals_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_est, n_ref = rng.integers(0, 9), rng.integers(0, 9)
        est = np.sort(rng.uniform(0, 4, n_est))
        ref = np.sort(rng.uniform(0, 4, n_ref))
        tol = float(rng.uniform(0.05, 0.8))
        adjacency = [[j for j, r in enumerate(ref) if abs(e - r) <= tol] for e in est]
        expected_tp = brute_force_max_matching(adjacency, len(ref))
        got, counts = mm._event_f_measure(list(est), list(ref), tol)
        assert counts["tp"] == expected_tp
        if n_est and n_ref:
            p, r = expected_tp / n_est, expected_tp / n_ref
            expected_f = 2 * p * r / (p + r) if p + r else 0.0
            assert got == pytest.approx(expected_f, abs=1e-12)


def test_greedy_insufficient_case():
    # nearest-first greedy would match est[0] to ref[1] and strand est[1];
    # maximum matching pairs both
    f, counts = mm._event_f_measure([1.0, 1.1], [0.95, 1.02], 0.1)
    assert counts["tp"] == 2 and f == 1.0


def test_chord_weighted_acc_hand_case():
    ref = IntervalAnnotation([(0, 2, "C:maj"), (2, 4, "A:min")])
    est = IntervalAnnotation([(0, 1, "C:maj"), (1, 4, "A:min")])
    assert mm.chord_weighted_acc(est, ref) == pytest.approx(0.75)
    assert mm.chord_weighted_acc(ref, ref) == 1.0
    all_none = IntervalAnnotation([(0, 4, "none")])
    assert mm.chord_weighted_acc(all_none, ref) == 0.0


def test_chord_weighted_acc_empty_reference():
    with pytest.raises(ValueError):
        mm.chord_weighted_acc(IntervalAnnotation([(0, 1, "C:maj")]), IntervalAnnotation([]))


def test_chord_weighted_acc_matches_rasterization():
    rng = np.random.default_rng(1)
    labels = ["C:maj", "G:maj", "A:min", "none", "F#:min"]
    for _ in range(40):
        def random_annotation():
            edges = np.sort(rng.uniform(0, 10, rng.integers(2, 6)))
            edges = np.unique(np.round(edges, 3))
            if len(edges) < 2:
                edges = np.array([0.0, 5.0])
            out = []
            for s, e in zip(edges[:-1], edges[1:]):
                out.append((float(s), float(e), labels[rng.integers(len(labels))]))
            return IntervalAnnotation(out)

        est, ref = random_annotation(), random_annotation()
        fast = mm.chord_weighted_acc(est, ref)
        slow = rasterized_chord_acc(est, ref)
        assert abs(fast - slow) < 2e-3  # grid quantization bound


def test_key_weighted_score_table():
    assert mm.key_weighted_score("C:maj", "C:maj") == 1.0
    assert mm.key_weighted_score("G:maj", "C:maj") == 0.5
    assert mm.key_weighted_score("A:min", "C:maj") == 0.3
    assert mm.key_weighted_score("C:min", "C:maj") == 0.2
    assert mm.key_weighted_score("D:maj", "C:maj") == 0.0
    assert mm.key_weighted_score("none", "none") == 1.0
    assert mm.key_weighted_score("none", "C:maj") == 0.0
    assert mm.key_weighted_score("C:maj", "none") == 0.0
    # minor-side relative: ref A:min -> relative major is C
    assert mm.key_weighted_score("C:maj", "A:min") == 0.3
    # fifth is directional: a fifth below earns nothing
    assert mm.key_weighted_score("F:maj", "C:maj") == 0.0
    with pytest.raises(ValueError):
        mm.key_weighted_score("X:maj", "C:maj")


def test_frame_accuracy():
    assert mm.frame_accuracy(["a", "b"], ["a", "b"]) == 1.0
    assert mm.frame_accuracy(["a", "b"], ["a", "c"]) == 0.5
    with pytest.raises(ValueError):
        mm.frame_accuracy([], [])
    with pytest.raises(ValueError):
        mm.frame_accuracy(["a"], ["a", "b"])


def test_tagging_hand_case():
    scores = np.array([[0.9], [0.8], [0.7], [0.6]])
    labels = np.array([[1], [0], [1], [0]])
    map_, auc = mm.tagging_scores(scores, labels)
    assert auc == pytest.approx(0.75)
    assert map_ == pytest.approx((1.0 + 2 / 3) / 2, abs=1e-4)
    assert abs(map_ - 0.8333) < 1e-4


def test_tagging_perfect_and_ties():
    scores = np.array([[0.9], [0.8], [0.2], [0.1]])
    labels = np.array([[1], [1], [0], [0]])
    map_, auc = mm.tagging_scores(scores, labels)
    assert map_ == 1.0 and auc == 1.0
    tied = np.full((6, 1), 0.5)
    tied_labels = np.array([[1], [0], [1], [0], [1], [0]])
    _, auc = mm.tagging_scores(tied, tied_labels)
    assert auc == pytest.approx(0.5)


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(3, 51))
        scores = np.round(rng.uniform(size=n), 2)  # rounding forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        got = mm.roc_auc(scores, labels)
        assert got == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_average_precision_tie_break_is_stable_by_index():
    # equal scores: earlier index ranks first
    scores = np.array([0.5, 0.5, 0.5])
    labels = np.array([0, 1, 1])
    # ranking order = index 0, 1, 2 -> precisions 1/2, 2/3
    assert mm.average_precision(scores, labels.astype(bool)) == pytest.approx((0.5 + 2 / 3) / 2)


def test_tagging_degenerate_column_skipped():
    scores = np.array([[0.9, 0.1], [0.8, 0.3], [0.1, 0.5]])
    labels = np.array([[1, 1], [0, 1], [0, 1]])  # second column all positive
    with pytest.warns(UserWarning, match="single class"):
        map_, auc = mm.tagging_scores(scores, labels)
    assert map_ == 1.0 and auc == 1.0
    with pytest.raises(ValueError):
        with pytest.warns(UserWarning):
            mm.tagging_scores(scores[:, 1:], labels[:, 1:])


def test_metrics_bounded_and_symmetric_property():
    rng = np.random.default_rng(3)
    for _ in range(200):
        times = np.sort(rng.uniform(0, 30, rng.integers(1, 12)))
        assert mm.beat_f1(list(times), list(times)) == 1.0
        other = np.sort(rng.uniform(0, 30, rng.integers(0, 12)))
        f = mm.beat_f1(list(other), list(times))
        assert 0.0 <= f <= 1.0


def test_eval_report_json_roundtrip():
    report = mm.beat_f1_report([1.0], [1.0])
    back = mm.EvalReport.from_json(report.to_json())
    assert back.task == "beat" and back.metrics["f_measure"] == 1.0
    assert json.loads(report.to_json())["config"]["tolerance"] == 0.07
    with pytest.raises(ValueError):
        mm.EvalReport("x", {"bad": 1.5})
