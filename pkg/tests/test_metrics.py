import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linear_sum_assignment

from cagan.engine import UsageError
from cagan.metrics import (Detection, MetricsReport, SegmentTimeline, action_segments, edit_score,
                           evaluate_all, f1_at_k, f1_counts, frame_accuracy, labels_to_segments,
                           levenshtein, map_at_mid, segment_iou, segments_to_labels)
from cagan.persistence import dumps_json, make_report, read_report, write_report

from oracles import levenshtein_oracle, sweep_ap

A, B = 1, 2
labels_st = st.lists(st.integers(0, 3), min_size=1, max_size=60)


def timeline(*segs):
    return SegmentTimeline(tuple(segs), segs[-1][1])


def random_labels(rng, n, k=4, mean_run=6):
    out = []
    while len(out) < n:
        out += [int(rng.integers(k))] * int(rng.integers(1, 2 * mean_run))
    return np.array(out[:n])


# -- segments ------------------------------------------------------------------

def test_labels_to_segments_examples():
    assert labels_to_segments([A, A, B, B, B]).segments == ((0, 2, A), (2, 5, B))
    assert labels_to_segments([3] * 7).segments == ((0, 7, 3),)
    with pytest.raises(UsageError):
        labels_to_segments([])


def test_timeline_invariants():
    with pytest.raises(UsageError):
        SegmentTimeline(((0, 2, A), (3, 5, B)), 5)
    with pytest.raises(UsageError):
        SegmentTimeline(((0, 2, A), (2, 5, A)), 5)
    with pytest.raises(UsageError):
        Detection(4, 4, A)


def test_segment_roundtrip_1000_lists():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        labels = rng.integers(0, 4, rng.integers(1, 50))
        tl = labels_to_segments(labels)
        np.testing.assert_array_equal(segments_to_labels(tl), labels)
        assert labels_to_segments(segments_to_labels(tl)) == tl


@given(labels_st)
def test_segments_are_maximal_runs(labels):
    segs = labels_to_segments(labels).segments
    assert all(a[2] != b[2] for a, b in zip(segs, segs[1:]))


# -- frame accuracy ---------------------------------------------------------------

def test_frame_accuracy_examples():
    assert frame_accuracy([0, 1, 2], [0, 1, 2]) == 100.0
    assert frame_accuracy([1, 1, 1], [0, 0, 0]) == 0.0
    assert frame_accuracy([0, 1, 1, 0], [0, 1, 2, 2]) == 50.0
    with pytest.raises(UsageError):
        frame_accuracy([0, 1], [0])


def test_frame_accuracy_degrades_with_corruption():
    rng = np.random.default_rng(1)
    truth = random_labels(rng, 400)
    order = rng.permutation(400)
    accs = []
    for n in range(0, 401, 40):
        pred = truth.copy()
        pred[order[:n]] = (truth[order[:n]] + 1) % 4
        accs.append(frame_accuracy(pred, truth))
    assert all(a > b for a, b in zip(accs, accs[1:]))


# -- F1 --------------------------------------------------------------------------

def test_f1_identical_and_hand_example():
    t = timeline((0, 50, A), (50, 100, B))
    p = timeline((0, 30, A), (30, 100, B))
    for tau in (0.1, 0.25, 0.5, 1.0):
        assert f1_at_k(t, t, tau) == 100.0
    assert segment_iou((0, 30), (0, 50)) == pytest.approx(0.6)
    assert segment_iou((30, 100), (50, 100)) == pytest.approx(50 / 70)
    assert f1_at_k(p, t, 0.5) == 100.0
    assert f1_at_k(p, t, 0.25) == 100.0
    assert f1_at_k(p, t, 0.65) == pytest.approx(50.0)


def test_f1_empty_conventions():
    bg = [0] * 10
    assert f1_at_k(bg, bg, 0.5) == 100.0
    assert f1_at_k([0] * 5 + [1] * 5, bg, 0.5) == 0.0
    assert f1_at_k(bg, [0] * 5 + [1] * 5, 0.5) == 0.0
    with pytest.raises(UsageError):
        f1_at_k(bg, bg, 0.0)


def optimal_tp(pred, truth, tau):
    p, t = action_segments(pred), action_segments(truth)
    if not p or not t:
        return 0
    ok = np.array([[ps[2] == ts[2] and segment_iou(ps, ts) >= tau for ts in t] for ps in p], dtype=float)
    rows, cols = linear_sum_assignment(-ok)
    return int(ok[rows, cols].sum())


def test_greedy_f1_against_optimal_matching():
    rng = np.random.default_rng(2)
    lower = 0
    for _ in range(500):
        truth = random_labels(rng, 80, mean_run=5)
        pred = random_labels(rng, 80, mean_run=5)
        assert f1_counts(pred, truth, 0.5)[0] == optimal_tp(pred, truth, 0.5)
        greedy = f1_counts(pred, truth, 0.1)[0]
        best = optimal_tp(pred, truth, 0.1)
        assert greedy <= best
        lower += greedy < best
    # below tau = 0.5 a prediction can overlap two truth runs, so greedy may fall short;
    # the count is informational only
    print(f"greedy below optimal in {lower} of 500 cases at tau = 0.1")


@given(labels_st, labels_st)
def test_f1_non_increasing_in_tau(a, b):
    n = min(len(a), len(b))
    scores = [f1_at_k(a[:n], b[:n], tau) for tau in (0.1, 0.25, 0.5, 0.75, 1.0)]
    assert all(x >= y for x, y in zip(scores, scores[1:]))
    assert all(0 <= s <= 100 for s in scores)


# -- edit ------------------------------------------------------------------------

def test_edit_examples():
    assert edit_score([A, A, B, B, B, A], [A, B, B]) == pytest.approx(100 * 2 / 3)
    assert edit_score([A, B, B, A], [A, A, B]) == pytest.approx(100 * (1 - 1 / 3))
    assert edit_score([B, B], [A, A]) == 0.0
    assert edit_score([0, 0], [0, 0]) == 100.0
    assert edit_score([1, 1, 2, 2, 2], [1, 2]) == 100.0


def test_edit_against_dp_oracle_1000_cases():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a = list(rng.integers(0, 4, rng.integers(0, 12)))
        b = list(rng.integers(0, 4, rng.integers(0, 12)))
        assert levenshtein(a, b) == levenshtein_oracle(a, b)
        pred, truth = random_labels(rng, 60), random_labels(rng, 60)
        pc = [c for _, _, c in action_segments(pred)]
        tc = [c for _, _, c in action_segments(truth)]
        longest = max(len(pc), len(tc))
        expected = 100.0 if longest == 0 else max(0.0, 100 * (1 - levenshtein_oracle(pc, tc) / longest))
        assert abs(edit_score(pred, truth) - expected) <= 1e-9


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=12))
def test_edit_ignores_durations(runs):
    a = [c for c, n, _ in runs for _ in range(n)]
    b = [c for c, _, m in runs for _ in range(m)]
    ref = list(np.repeat([c for c, _, _ in runs], 1))
    assert edit_score(a, ref) == edit_score(b, ref)


# -- mAP@mid ---------------------------------------------------------------------

def test_map_examples():
    truth = [A] * 10
    assert map_at_mid([[Detection(0, 10, A, 0.9)]], [truth]) == 100.0
    truth = [A] * 10 + [0] * 10
    assert map_at_mid([[Detection(10, 20, A, 0.9)]], [truth]) == 0.0
    # midpoint uses floor: (9 + 12) // 2 = 10 lies outside [0, 10)
    assert map_at_mid([[Detection(9, 12, A, 0.9)]], [truth]) == 0.0
    assert map_at_mid([[Detection(7, 12, A, 0.9)]], [truth]) == 100.0


def test_map_no_truth_actions():
    assert map_at_mid([[]], [[0, 0, 0]]) == 100.0
    assert map_at_mid([[Detection(0, 2, A, 0.5)]], [[0, 0, 0]]) == 0.0


def test_map_against_threshold_sweep():
    rng = np.random.default_rng(4)
    for _ in range(200):
        truth = random_labels(rng, 100, k=2, mean_run=8)
        tsegs = [(s, e) for s, e, c in action_segments(truth)]
        if not tsegs:
            continue
        n = int(rng.integers(1, 12))
        confs = rng.permutation(1000)[:n] / 1000.0
        dets = []
        for c in confs:
            s = int(rng.integers(0, 99))
            dets.append(Detection(s, int(rng.integers(s + 1, 101)), A, float(c)))
        assert abs(map_at_mid([dets], [truth]) - 100 * sweep_ap(dets, tsegs)) <= 1e-9


def test_map_pooled_and_per_video_differ_in_ranking():
    truths = [[A] * 4 + [0] * 4, [A] * 4 + [0] * 4]
    dets = [[Detection(0, 4, A, 0.9), Detection(4, 8, A, 0.8)], [Detection(0, 4, A, 0.5)]]
    pooled = map_at_mid(dets, truths)
    per_video = map_at_mid(dets, truths, pooled=False)
    assert pooled == pytest.approx(100 * (1 + 2 / 3) / 2)
    assert per_video == pytest.approx(100 * (1 + 1) / 2)


# -- full report --------------------------------------------------------------------

def test_evaluate_all_perfect():
    rng = np.random.default_rng(5)
    truths = [random_labels(rng, 80, k=5) for _ in range(3)]
    dists = [np.eye(5)[t] for t in truths]
    report = evaluate_all(truths, truths, dists, k=5)
    assert all(v == 100.0 for v in report.values())


def test_evaluate_all_fuzz_range():
    rng = np.random.default_rng(6)
    for _ in range(50):
        truths = [random_labels(rng, 50, k=4) for _ in range(2)]
        preds = [random_labels(rng, 50, k=4) for _ in range(2)]
        dists = [rng.dirichlet(np.ones(4), 50) for _ in range(2)]
        report = evaluate_all(preds, truths, dists, k=4)
        assert all(0.0 <= v <= 100.0 for v in report.values())


def test_report_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    truths = [random_labels(rng, 60, k=4)]
    preds = [random_labels(rng, 60, k=4)]
    report = evaluate_all(preds, truths, [rng.dirichlet(np.ones(4), 60)], k=4)
    path = tmp_path / "metrics.json"
    write_report(path, make_report("metrics", report.as_dict()))
    back = MetricsReport.from_dict(read_report(path)["payload"])
    assert back == report
    assert dumps_json(back.as_dict()) == dumps_json(report.as_dict())
