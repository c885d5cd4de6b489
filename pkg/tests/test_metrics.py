import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from pointtrack.errors import ShapeError
from pointtrack.metrics import (THRESHOLDS, MetricsReport, aggregate, average_jaccard, delta_avg,
                                eval_first_query, first_visible_queries, gt_predictor,
                                jaccard_per_threshold, model_predictor, occlusion_accuracy,
                                to_metric_frame, video_metrics)
from pointtrack.synth import generate_scene


# brute-force scalar references

def _delta_ref(pred, gt, mask):
    N, T = mask.shape
    fracs = []
    for k in THRESHOLDS:
        hit = n = 0
        for i in range(N):
            for t in range(T):
                if mask[i, t]:
                    n += 1
                    dx, dy = pred[i, t, 0] - gt[i, t, 0], pred[i, t, 1] - gt[i, t, 1]
                    hit += dx * dx + dy * dy < k * k
        fracs.append(hit / n)
    s = 0.0
    for f in fracs:
        s += f
    return fracs, s / len(fracs)


def _oa_ref(pv, gv, mask):
    agree = n = 0
    for i in range(pv.shape[0]):
        for t in range(pv.shape[1]):
            if mask[i, t]:
                n += 1
                agree += bool(pv[i, t]) == bool(gv[i, t])
    return agree / n


def _aj_ref(pred, pv, gt, gv, mask):
    js = []
    for k in THRESHOLDS:
        tp = fp = fn = 0
        for i in range(pv.shape[0]):
            for t in range(pv.shape[1]):
                if not mask[i, t]:
                    continue
                d2 = (pred[i, t, 0] - gt[i, t, 0]) ** 2 + (pred[i, t, 1] - gt[i, t, 1]) ** 2
                within = d2 < k * k
                if gv[i, t] and pv[i, t] and within:
                    tp += 1
                elif pv[i, t]:
                    fp += 1
                if gv[i, t] and not (pv[i, t] and within):
                    fn += 1
        js.append(tp / (tp + fp + fn))
    s = 0.0
    for j in js:
        s += j
    return js, s / len(js)


def _instance(seed, N=4, T=6):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 30, (N, T, 2))
    pred = gt + rng.normal(0, 6, gt.shape) * (rng.random((N, T, 1)) < 0.8)
    gv = rng.random((N, T)) < 0.7
    gv[0, 0] = True
    pv = rng.random((N, T)) < 0.6
    mask = rng.random((N, T)) < 0.85
    mask[0, 0] = True
    return pred, pv, gt, gv, mask


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force(seed):
    pred, pv, gt, gv, mask = _instance(seed)
    per, mean = delta_avg(pred, gt, gv & mask)
    ref_f, ref_m = _delta_ref(pred, gt, gv & mask)
    assert [per[k] for k in THRESHOLDS] == ref_f and mean == ref_m
    assert occlusion_accuracy(pv, gv, mask) == _oa_ref(pv, gv, mask)
    js, aj = _aj_ref(pred, pv, gt, gv, mask)
    assert [jaccard_per_threshold(pred, pv, gt, gv, mask)[k] for k in THRESHOLDS] == js
    assert average_jaccard(pred, pv, gt, gv, mask) == aj


def test_delta_examples():
    gt = np.zeros((1, 1, 2))
    per, mean = delta_avg(gt, gt)
    assert all(v == 1.0 for v in per.values()) and mean == 1.0
    per, mean = delta_avg(np.array([[[3.0, 0.0]]]), gt)
    assert [per[k] for k in THRESHOLDS] == [0, 0, 1, 1, 1] and mean == pytest.approx(0.6)
    per, mean = delta_avg(np.array([[[0.5, 0.0]], [[0.0, 20.0]]]), np.zeros((2, 1, 2)))
    assert all(v == 0.5 for v in per.values()) and mean == 0.5
    assert delta_avg(gt, gt, np.zeros((1, 1), bool)) == (None, None)


def test_threshold_is_strict():
    per, _ = delta_avg(np.array([[[4.0, 0.0]]]), np.zeros((1, 1, 2)))
    assert per[4] == 0.0 and per[8] == 1.0


def test_oa_examples():
    a = np.array([[True, False, True, True]])
    assert occlusion_accuracy(a, a) == 1.0
    assert occlusion_accuracy(a, ~a) == 0.0
    b = a.copy()
    b[0, 1] = True
    assert occlusion_accuracy(a, b) == 0.75
    with pytest.raises(ShapeError):
        occlusion_accuracy(a, a[:, :2])


def test_aj_examples():
    gt = np.zeros((2, 2, 2))
    vis = np.ones((2, 2), bool)
    assert average_jaccard(gt, vis, gt, vis) == 1.0
    assert average_jaccard(gt, ~vis, gt, vis) == 0.0
    # point 0 frame 0: TP; point 1 frame 0: predicted visible but gt occluded (FP)
    pred = np.zeros((2, 1, 2))
    gvis = np.array([[True], [False]])
    pvis = np.array([[True], [True]])
    assert jaccard_per_threshold(pred, pvis, np.zeros((2, 1, 2)), gvis)[4] == 0.5
    assert average_jaccard(gt, vis, gt, np.zeros((2, 2), bool)) is None


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 23), st.floats(0.0, 1.0))
def test_monotone_in_single_error(seed, cell, shrink):
    pred, pv, gt, gv, mask = _instance(seed)
    i, t = divmod(cell, 6)
    better = pred.copy()
    better[i, t] = gt[i, t] + (pred[i, t] - gt[i, t]) * shrink
    _, d0 = delta_avg(pred, gt, gv & mask)
    _, d1 = delta_avg(better, gt, gv & mask)
    assert d1 >= d0
    a0 = average_jaccard(pred, pv, gt, gv, mask)
    a1 = average_jaccard(better, pv, gt, gv, mask)
    assert a1 >= a0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_aj_bounded_by_delta_without_false_positives(seed):
    pred, pv, gt, gv, mask = _instance(seed)
    pv = pv & gv
    aj = average_jaccard(pred, pv, gt, gv, mask)
    _, d = delta_avg(pred, gt, gv & mask)
    assert aj <= d + 1e-15


def test_metric_frame_scaling():
    t = np.array([[[32.0, 16.0]]])
    np.testing.assert_array_equal(to_metric_frame(t, 64, 128), [[[64.0, 64.0]]])


def test_first_visible_queries():
    gt = np.arange(24, dtype=float).reshape(3, 4, 2)
    vis = np.array([[0, 1, 1, 0], [0, 0, 0, 0], [1, 0, 0, 1]], bool)
    q, kept = first_visible_queries(gt, vis)
    assert kept.tolist() == [0, 2]
    np.testing.assert_array_equal(q, [[1, 2, 3], [0, 16, 17]])


def test_video_metrics_evaluates_only_after_query():
    gt = np.zeros((1, 3, 2))
    pred = gt.copy()
    pred[0, 0] = 100.0                      # before/at query: ignored
    vis = np.ones((1, 3), bool)
    m = video_metrics(pred, vis, gt, vis, [0], 64, 64)
    assert m["delta_avg_vis"] == 1.0
    assert m["aj"] == 1.0 and m["oa"] == 1.0 and m["epe_vis"] == 0.0
    assert m["delta_avg_occ"] is None


def test_report_round_trip(tmp_path):
    rep = MetricsReport(aj=0.5, delta_avg_vis=0.625, delta_avg_occ=None, oa=0.875,
                        per_threshold={1: 0.1, 2: 0.2, 4: 0.7, 8: 0.9, 16: 1.0}, n_points=7,
                        n_frames=24, n_videos=1, n_excluded=2, epe_vis=1.25, extra={"mode": "x"})
    rep.save(tmp_path / "r.json")
    assert MetricsReport.load(tmp_path / "r.json") == rep


def test_aggregate_skips_undefined():
    a = {"aj": 0.5, "delta_avg_vis": 0.5, "delta_avg_occ": None, "oa": 1.0, "epe_vis": 2.0,
         "per_threshold": {k: 0.5 for k in THRESHOLDS}}
    b = {"aj": 1.0, "delta_avg_vis": 1.0, "delta_avg_occ": 0.25, "oa": 0.5, "epe_vis": 4.0,
         "per_threshold": {k: 1.0 for k in THRESHOLDS}}
    rep = aggregate([a, b])
    assert rep.aj == 0.75 and rep.delta_avg_occ == 0.25 and rep.n_videos == 2
    assert rep.per_threshold[8] == 0.75


def _scenes(n, seed0=100):
    return [generate_scene(seed0 + i, T=10, H=32, W=32, n_sprites=2, n_tracks=12) for i in range(n)]


def test_gt_against_itself_is_perfect():
    rep = eval_first_query(gt_predictor, _scenes(3))
    assert rep.aj == 1.0 and rep.delta_avg_vis == 1.0 and rep.oa == 1.0
    assert rep.n_videos == 3 and rep.epe_vis == 0.0


@pytest.mark.parametrize("mode", ["offline", "online"])
def test_zero_head_delta_from_gt_displacements(mode):
    scenes = _scenes(2, seed0=7)
    model = tiny_model(randomize_heads=False)
    rep = eval_first_query(model_predictor(model, mode, window=4), scenes, one_at_a_time=False)
    per_video = []
    for sc in scenes:
        vis = sc.gt_visibility
        fracs = []
        for k in THRESHOLDS:
            hit = n = 0
            for i in range(vis.shape[0]):
                if not vis[i].any():
                    continue
                tq = int(np.argmax(vis[i]))
                for t in range(tq + 1, vis.shape[1]):
                    if vis[i, t]:
                        d = (sc.gt_tracks[i, t] - sc.gt_tracks[i, tq]) * 256 / 32
                        n += 1
                        hit += float(d @ d) < k * k
            fracs.append(hit / n)
        per_video.append(sum(fracs) / len(fracs))
    assert rep.delta_avg_vis == pytest.approx(sum(per_video) / len(per_video), abs=1e-12)
    assert rep.delta_avg_vis < 1.0
