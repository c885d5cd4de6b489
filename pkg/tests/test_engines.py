import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_queries, tiny_model
from pointtrack.errors import CapacityError, ParameterError, ShapeError, StreamError
from pointtrack.engines import (OnlineTracker, TrackResult, add_support_points, first_window,
                                gate_visibility, num_windows, read_tracks, track_offline,
                                track_online, window_stride, write_tracks)
from pointtrack.model import query_pin_mask
from pointtrack.transformer import TrackState

H = W_ = 32


def _video(rng, T):
    return rng.random((T, 3, H, W_)).astype(np.float32)


def _zero_model():
    m = tiny_model(randomize_heads=False)
    return m


def _window_oracle(T, W):
    s, n, start = W // 2, 1, 0
    while start + W < T:
        start += s
        n += 1
    return n


@pytest.mark.parametrize("W", [4, 8, 16])
def test_window_count_formula(W):
    for T in range(W, 4 * W + 1):
        assert num_windows(T, W) == _window_oracle(T, W)
    assert num_windows(3, W) == 1


def test_first_window_contains_query():
    W, s = 8, 4
    for tq in range(40):
        w = int(first_window(tq, W))
        assert w * s <= tq < w * s + W
        assert w == 0 or not ((w - 1) * s <= tq < (w - 1) * s + W)


def test_window_stride_rejects_odd():
    with pytest.raises(ParameterError):
        window_stride(7)
    with pytest.raises(ParameterError):
        window_stride(2)


def test_zero_head_returns_queries_both_engines(rng):
    m = _zero_model()
    v = _video(rng, 13)
    q = random_queries(rng, 5, 13, H, W_)
    for res in (track_offline(m, v, q), track_online(m, v, q, window=8)):
        assert np.array_equal(res.tracks, np.broadcast_to(q[:, None, 1:], res.tracks.shape))


@pytest.mark.parametrize("seed", range(5))
def test_query_frame_bit_exact(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    v = _video(rng, 12)
    q = random_queries(rng, 6, 12, H, W_)
    for res in (track_offline(m, v, q), track_online(m, v, q, window=8)):
        tq = q[:, 0].astype(int)
        assert np.array_equal(res.tracks[np.arange(6), tq], q[:, 1:])


def test_single_window_equals_iterate(rng):
    m = tiny_model(seed=4)
    T = 8
    v = _video(rng, T)
    q = random_queries(rng, 5, T, H, W_)
    res = track_online(m, v, q, window=T)
    with torch.no_grad():
        vt, qt = torch.from_numpy(v)[None], torch.from_numpy(q)[None]
        pyr = m.pyramid(vt)
        ref = m.iterate(pyr, qt, TrackState.init(qt, T), m.cfg.iters_eval)[-1]
    after = np.arange(T)[None] >= q[:, :1].astype(int)
    np.testing.assert_allclose(res.tracks[after], ref.P[0].numpy()[after], rtol=0, atol=1e-6)
    np.testing.assert_allclose(res.visibility_prob[after], torch.sigmoid(ref.V[0]).numpy()[after],
                               rtol=0, atol=1e-6)
    np.testing.assert_allclose(res.confidence_prob[after], torch.sigmoid(ref.C[0]).numpy()[after],
                               rtol=0, atol=1e-6)
    # before the query: placeholder
    assert np.all(res.visibility_prob[~after] == 0)
    assert np.array_equal(res.tracks[~after], np.broadcast_to(q[:, None, 1:], res.tracks.shape)[~after])


def test_overlap_frames_come_from_later_window(rng):
    m = tiny_model(seed=2)
    v = _video(rng, 12)
    q = random_queries(rng, 4, 1, H, W_)       # all at frame 0
    tr = OnlineTracker(m, q, window=8)
    for t in range(12):
        tr.push(t, v[t])
    res = tr.finish()
    second = tr.prev                             # output of window 1, frames 4..11
    np.testing.assert_array_equal(res.tracks[:, 4:12], second.P[0].numpy())
    np.testing.assert_array_equal(res.visibility_prob[:, 4:], torch.sigmoid(second.V[0]).numpy())


def test_online_causality(rng):
    m = tiny_model(seed=6)
    W, T = 8, 20
    q = random_queries(rng, 5, T, H, W_)
    a = _video(rng, T)
    for change_at in (8, 12, 16):
        b = a.copy()
        b[change_at:] = rng.random(b[change_at:].shape)
        ta, tb = OnlineTracker(m, q, W), OnlineTracker(m, q, W)
        for t in range(T):
            ea, eb = ta.push(t, a[t]), tb.push(t, b[t])
            if t < change_at:
                assert (ea is None) == (eb is None)
                if ea is not None:
                    for x, y in zip(ea, eb):
                        assert np.array_equal(x, y)
        ra, rb = ta.finish(), tb.finish()
        # every frame finalised before the change stays identical
        stable = (change_at - W) // (W // 2) * (W // 2) + W // 2 if change_at >= W else 0
        assert np.array_equal(ra.tracks[:, :stable], rb.tracks[:, :stable])


def test_online_handles_late_queries_and_short_video(rng):
    m = tiny_model(seed=1)
    v = _video(rng, 5)
    q = np.array([[4, 10, 10], [0, 3, 3]], np.float32)
    res = track_online(m, v, q, window=8)
    assert res.tracks.shape == (2, 5, 2)
    assert np.all(res.visibility_prob[0, :4] == 0)


def test_stream_errors(rng):
    m = tiny_model()
    tr = OnlineTracker(m, np.array([[0, 1, 1]], np.float32))
    with pytest.raises(StreamError):
        tr.finish()
    tr.push(0, _video(rng, 1)[0])
    with pytest.raises(StreamError):
        tr.push(2, _video(rng, 1)[0])


def test_offline_capacity_and_query_checks(rng):
    m = tiny_model()
    with pytest.raises(CapacityError):
        track_offline(m, _video(rng, 10), [[0, 1, 1]], max_len=8)
    with pytest.raises(ShapeError):
        track_offline(m, _video(rng, 4), [[4, 1, 1]])
    with pytest.raises(ShapeError):
        track_offline(m, _video(rng, 4), [[0.5, 1, 1]])
    with pytest.raises(ShapeError):
        track_offline(m, _video(rng, 4), [[0, 1]])


def test_offline_tracks_backward(rng):
    m = tiny_model(seed=8)
    T = 6
    q = np.array([[T - 1, 12.0, 15.0]], np.float32)
    res = track_offline(m, _video(rng, T), q)
    assert np.isfinite(res.tracks).all()
    assert not np.allclose(res.tracks[0, :T - 1], q[0, 1:])


def test_support_point_count_and_mask():
    q = np.array([[3, 100.0, 50.0]], np.float32)
    ext, mask = add_support_points(q, 256, 256)
    assert len(ext) == 90 and mask.sum() == 1
    assert np.array_equal(ext[mask], q)
    assert np.all(ext[:, 0] == 3)
    local = ext[26:]
    np.testing.assert_allclose(local[:, 1:].mean(0), q[0, 1:], atol=1e-4)
    r = 256 / 16
    assert np.isclose(local[:, 1].min(), 100 - r) and np.isclose(local[:, 1].max(), 100 + r)


def test_support_local_grid_clipped_and_global_per_frame():
    q = np.array([[0, 0.0, 63.0], [0, 5.0, 5.0], [2, 30.0, 30.0]], np.float32)
    ext, mask = add_support_points(q, 64, 64)
    assert len(ext) == 3 + 2 * 25 + 3 * 64
    assert ext[:, 1].min() >= 0 and ext[:, 2].max() <= 63
    ext2, _ = add_support_points(q, 64, 64, grid_global=0, grid_local=0)
    assert np.array_equal(ext2, q)


def test_gate_examples():
    r = TrackResult(np.zeros((2, 1, 2)), np.array([[0.9], [1.0]]), np.array([[0.9], [0.5]]),
                    np.zeros((2, 3)))
    assert gate_visibility(r, 0.6).tolist() == [[True], [False]]
    for bad in (0.0, 1.0, -1):
        with pytest.raises(ParameterError):
            gate_visibility(r, bad)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.99))
def test_gate_matches_product(v, c, thr):
    r = TrackResult(np.zeros((1, 1, 2)), np.array([[v]]), np.array([[c]]), np.zeros((1, 3)))
    assert bool(gate_visibility(r, thr)[0, 0]) == (v * c > thr)


def test_track_file_round_trip(tmp_path, rng):
    m = tiny_model()
    q = random_queries(rng, 3, 6, H, W_)
    res = track_offline(m, _video(rng, 6), q)
    write_tracks(res, tmp_path / "t.trk", {"mode": "offline"})
    back = read_tracks(tmp_path / "t.trk")
    for a, b in ((res.tracks, back.tracks), (res.visibility_prob, back.visibility_prob),
                 (res.confidence_prob, back.confidence_prob), (res.queries, back.queries)):
        assert np.array_equal(a, b)
    assert back.meta == res.meta


def test_subset():
    r = TrackResult(np.arange(12.0).reshape(3, 2, 2), np.ones((3, 2)), np.ones((3, 2)),
                    np.zeros((3, 3)))
    s = r.subset([True, False, True])
    assert s.tracks.shape == (2, 2, 2) and s.tracks[1, 0, 0] == 8
