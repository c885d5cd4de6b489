"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL summary (printed at the end of the
run) before asserting.  Criteria 8-10 evaluate the trained checkpoints in
``artifacts/`` (override with ``POINTTRACK_ARTIFACTS``); they are produced by
the commands listed in the README.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import random_queries, record_criterion, tiny_model
from test_correlation import bilinear_oracle, corr_oracle
from test_losses import _bce_scalar, _huber_scalar, _oracle, _states
from test_metrics import _aj_ref, _delta_ref, _instance, _oa_ref
from test_model import _fd_check
from pointtrack.correlation import CorrMLP, corr4d, sample_neighborhood
from pointtrack.distill import TeacherRegistry, finetune_student
from pointtrack.engines import OnlineTracker, num_windows, track_offline, track_online
from pointtrack.features import FeatureNet
from pointtrack.losses import LossConfig, conf_loss, huber, loss_calls, total_loss, track_loss, vis_loss
from pointtrack.metrics import (THRESHOLDS, average_jaccard, delta_avg, eval_first_query,
                                gt_predictor, model_predictor, occlusion_accuracy)
from pointtrack.model import load_checkpoint
from pointtrack.presets import DistillConfig
from pointtrack.synth import generate_scene
from pointtrack.transformer import TrackState, TrackTransformer

ARTIFACTS = Path(os.environ.get("POINTTRACK_ARTIFACTS",
                                Path(__file__).resolve().parents[1] / "artifacts"))
HELDOUT_SEED, N_HELDOUT = 1_000_000, 100
SELF_TRAIN_TOLERANCE = 0.005


def _verdict(n, ok, detail):
    record_criterion(n, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_criterion_01_correlation_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for case in range(100):
        r = 1 + case % 3
        K = (2 * r + 1) ** 2
        q = rng.normal(size=(K, 8))
        f = rng.normal(size=(K, 8))
        got = corr4d(torch.from_numpy(q), torch.from_numpy(f)).numpy()
        worst = max(worst, float(np.abs(got - corr_oracle(q, f)).max()))
    dt = time.perf_counter() - t0
    _verdict(1, worst < 1e-6 and dt < 10, f"max abs err {worst:.2e} over 100 cases, {dt:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_02_bilinear_sampling():
    rng = np.random.default_rng(2)
    torch.manual_seed(0)
    net = FeatureNet(d=4, k=4, S=3, width=8, blocks=1).double()
    with torch.no_grad():
        pyr = net.pyramid(torch.from_numpy(rng.random((1, 1, 3, 64, 64))))
    worst, n_clamped = 0.0, 0
    for s in range(pyr.S):
        fmap = pyr.maps[s][0]                       # (1, d, h, w)
        stride = pyr.stride(s)
        centers = rng.uniform(-20, 84, size=(1, 20, 2))
        got = sample_neighborhood(fmap, torch.from_numpy(centers), 1, stride)[0].numpy()
        fm = fmap[0].numpy()
        h, w = fm.shape[1:]
        for m in range(20):
            cx, cy = centers[0, m] / stride
            j = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    x, y = cx + dx, cy + dy
                    n_clamped += not (0 <= x <= w - 1 and 0 <= y <= h - 1)
                    worst = max(worst, float(np.abs(got[m, j] - bilinear_oracle(fm, x, y)).max()))
                    j += 1
    _verdict(2, worst < 1e-5 and n_clamped > 0,
             f"max abs err {worst:.2e}, 20 centres x {pyr.S} scales, {n_clamped} clamped samples")


# ---------------------------------------------------------------- 3


def test_criterion_03_loss_oracles():
    cfg = LossConfig()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0, 40, (3, 5, 2))
        vis = rng.random((3, 5)) < 0.6
        P = [gt + rng.normal(0, s, gt.shape) for s in (15.0, 4.0)]
        C = [rng.normal(0, 2, (3, 5)) for _ in range(2)]
        V = [rng.normal(0, 2, (3, 5)) for _ in range(2)]
        st = _states(P, C, V)
        got = (track_loss(st, torch.tensor(gt), torch.tensor(vis)),
               conf_loss(st, torch.tensor(gt)), vis_loss(st, torch.tensor(vis)))
        for a, b in zip(got, _oracle(P, C, V, gt, vis, cfg)):
            worst = max(worst, abs(float(a) - b))
    z = torch.zeros(2, dtype=torch.float64)
    hand = [
        float(huber(torch.tensor([6.0, 0.0], dtype=torch.float64), z)) == 18.0,
        float(huber(torch.tensor([6.0, 8.0], dtype=torch.float64), z)) == 42.0,
        float(track_loss(_states([[[[2.0, 0.0]]]]), torch.zeros(1, 1, 2, dtype=torch.float64),
                         torch.zeros(1, 1))) == 0.2 * _huber_scalar(2, 0, 0, 0, 6),
        float(vis_loss(_states([[[[0.0, 0.0]]]]), torch.ones(1, 1))) == _bce_scalar(0.0, 1.0),
    ]
    ok = worst < 1e-6 and all(hand) and _bce_scalar(0.0, 1.0) == pytest.approx(np.log(2), abs=1e-15)
    _verdict(3, ok, f"max abs err {worst:.2e} on 50 instances; hand cases 18/42/0.4/ln2 {hand}")


# ---------------------------------------------------------------- 4


def test_criterion_04_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    torch.manual_seed(0)
    names = []

    fnet = FeatureNet(d=4, k=4, S=2, width=4, blocks=1).double()
    video = torch.from_numpy(rng.random((1, 2, 3, 32, 32))).requires_grad_()

    def f_feat():
        return sum((m ** 2).sum() for m in fnet.pyramid(video).maps)
    _fd_check(f_feat, [video, next(fnet.parameters())], n_coords=6)
    names.append("feature net")

    mlp = CorrMLP(radius=1, p=8, hidden=16).double()
    x = torch.from_numpy(rng.normal(size=(3, mlp.in_dim))).requires_grad_()
    _fd_check(lambda: (mlp(x) ** 2).sum(), [x] + list(mlp.parameters())[:1], n_coords=6)
    names.append("correlation MLP")

    tx = TrackTransformer(in_dim=10, width=32, layers=1, heads=2, n_proxy=3).double()
    with torch.no_grad():
        tx.track_head.weight.normal_(0, 0.3)
        tx.cv_head.weight.normal_(0, 0.3)
    grid = torch.from_numpy(rng.normal(size=(1, 3, 4, 10))).requires_grad_()

    def f_tx():
        dP, dC, dV = tx(grid)
        return (dP ** 2).sum() + (dC ** 2).sum() + (dV ** 2).sum()
    _fd_check(f_tx, [grid, tx.track_head.weight], n_coords=10)
    names.append("transformer step")

    m = tiny_model(seed=1, detach_tracks=False).double().train()
    vid = torch.from_numpy(rng.random((1, 4, 3, 32, 32)))
    q = torch.from_numpy(random_queries(rng, 2, 4, 32, 32)[None].astype(np.float64))
    gt = q[:, :, None, 1:].expand(1, 2, 4, 2) + torch.from_numpy(rng.normal(0, 2, (1, 2, 4, 2)))
    vis = torch.from_numpy(rng.random((1, 2, 4)) < 0.7)
    _fd_check(lambda: total_loss(m(vid, q, iters=2), gt, vis)[0],
              [m.transformer.track_head.weight, m.transformer.cv_head.bias,
               next(m.corr_mlp.parameters()), next(m.fnet.parameters())], n_coords=4)
    names.append("total loss")
    dt = time.perf_counter() - t0
    _verdict(4, dt < 120, f"rel err < 1e-3 for {', '.join(names)} ({dt:.1f}s)")


# ---------------------------------------------------------------- 5


def test_criterion_05_permutation_equivariance():
    rng = np.random.default_rng(5)
    m = tiny_model(seed=5).double()
    worst = 0.0
    for trial in range(20):
        N, T = 6, 6
        video = torch.from_numpy(rng.random((1, T, 3, 32, 32)))
        q = torch.from_numpy(random_queries(rng, N, T, 32, 32)[None].astype(np.float64))
        perm = torch.from_numpy(rng.permutation(N))
        with torch.no_grad():
            a = m(video, q, iters=4)[-1]
            b = m(video, q[:, perm], iters=4)[-1]
        for x, y in ((a.P, b.P), (a.C, b.C), (a.V, b.V)):
            worst = max(worst, float((x[:, perm] - y).abs().max()))
    _verdict(5, worst < 1e-5, f"max abs deviation {worst:.2e} over 20 trials (M=4, float64)")


# ---------------------------------------------------------------- 6


def test_criterion_06_query_frame_exactness():
    bad = 0
    for seed in range(20):
        sc = generate_scene(50 + seed, T=12, H=32, W=32, n_sprites=2, n_tracks=8)
        rng = np.random.default_rng(seed)
        q = random_queries(rng, 6, 12, 32, 32)
        m = tiny_model(seed=seed)
        for res in (track_offline(m, sc.video, q), track_online(m, sc.video, q, window=4)):
            tq = q[:, 0].astype(int)
            bad += int(not np.array_equal(res.tracks[np.arange(6), tq], q[:, 1:]))
    _verdict(6, bad == 0, f"{bad} mismatches over 20 scenes x 2 engines")


# ---------------------------------------------------------------- 7


def test_criterion_07_metric_oracles():
    mism = 0
    for seed in range(50):
        pred, pv, gt, gv, mask = _instance(seed)
        per, mean = delta_avg(pred, gt, gv & mask)
        fr, mr = _delta_ref(pred, gt, gv & mask)
        mism += [per[k] for k in THRESHOLDS] != fr or mean != mr
        mism += occlusion_accuracy(pv, gv, mask) != _oa_ref(pv, gv, mask)
        mism += average_jaccard(pred, pv, gt, gv, mask) != _aj_ref(pred, pv, gt, gv, mask)[1]
    scenes = [generate_scene(700 + i, T=10, H=32, W=32, n_sprites=2, n_tracks=12) for i in range(3)]
    rep = eval_first_query(gt_predictor, scenes)
    perfect = rep.aj == 1.0 and rep.delta_avg_vis == 1.0 and rep.oa == 1.0
    _verdict(7, mism == 0 and perfect,
             f"{mism} mismatches on 50 instances; gt-vs-gt AJ={rep.aj} d={rep.delta_avg_vis} "
             f"OA={rep.oa}")


# ---------------------------------------------------------------- 8-10 (trained checkpoints)


@pytest.fixture(scope="module")
def heldout():
    return [generate_scene(HELDOUT_SEED + i) for i in range(N_HELDOUT)]


_reports = {}


def _report(name, scenes):
    if name not in _reports:
        path = ARTIFACTS / f"{name}.ckpt"
        if not path.exists():
            pytest.fail(f"missing trained checkpoint {path}")
        model = load_checkpoint(path)
        _reports[name] = eval_first_query(model_predictor(model, "offline"), scenes,
                                          one_at_a_time=False)
    return _reports[name]


@pytest.mark.slow
def test_criterion_08_desk_scale_training(heldout):
    rep = _report("offline", heldout)
    static = [generate_scene(3_000_000 + i, max_speed=0.0) for i in range(10)]
    model = load_checkpoint(ARTIFACTS / "offline.ckpt")
    srep = eval_first_query(model_predictor(model, "offline"), static, one_at_a_time=False)
    ok = rep.delta_avg_vis >= 0.60 and rep.epe_vis <= 3.0 and srep.epe_vis <= 1.0
    _verdict(8, ok, f"held-out d_vis={rep.delta_avg_vis:.3f} (>=0.60) EPE={rep.epe_vis:.2f}px "
                    f"(<=3) static EPE={srep.epe_vis:.2f}px (<=1); AJ={rep.aj:.3f} OA={rep.oa:.3f}")


@pytest.mark.slow
def test_criterion_09_distillation_direction(heldout):
    before = _report("student", heldout).delta_avg_vis
    distilled = _report("distill", heldout).delta_avg_vis
    selftrained = _report("selftrain", heldout).delta_avg_vis
    ok = distilled > before and selftrained >= before - SELF_TRAIN_TOLERANCE
    _verdict(9, ok, f"student d_vis={before:.4f}, distilled={distilled:.4f} "
                    f"({distilled - before:+.4f}), self-trained={selftrained:.4f} "
                    f"({selftrained - before:+.4f})")


def test_criterion_10_frozen_head():
    ok, parts = True, []
    for name in ("distill", "selftrain"):
        a, b = ARTIFACTS / "student.ckpt", ARTIFACTS / f"{name}.ckpt"
        if not (a.exists() and b.exists()):
            ok = False
            parts.append(f"{name}: checkpoint missing")
            continue
        sa, sb = load_checkpoint(a), load_checkpoint(b)
        same = all(torch.equal(x, y) for x, y in zip(sa.cv_head_parameters(), sb.cv_head_parameters()))
        moved = any(not torch.equal(x, y) for (n, x), (_, y)
                    in zip(sa.named_parameters(), sb.named_parameters()) if "cv_head" not in n)
        ok &= same and moved
        parts.append(f"{name}: head identical={same}, rest updated={moved}")
    # fresh run: 100 steps on a tiny student
    student = tiny_model(seed=4)
    head = [p.detach().clone() for p in student.cv_head_parameters()]
    calls = (loss_calls["conf"], loss_calls["vis"])
    vids = [generate_scene(i, T=8, H=32, W=32, n_sprites=2, n_tracks=8) for i in range(3)]
    finetune_student(student, TeacherRegistry([tiny_model(seed=9)]), vids,
                     DistillConfig(n_queries=8, n_keyframes=2, min_points_per_frame=4,
                                   steps=100, log_every=50, lr=1e-3))
    fresh = all(torch.equal(x, y) for x, y in zip(head, student.cv_head_parameters()))
    fresh &= calls == (loss_calls["conf"], loss_calls["vis"])
    ok &= fresh
    parts.append(f"100-step run: head identical and conf/vis never evaluated={fresh}")
    _verdict(10, ok, "; ".join(parts))


# ---------------------------------------------------------------- 11


def test_criterion_11_engine_contracts():
    W = 8
    counts_ok = True
    for T in range(W, 4 * W + 1):
        start, n = 0, 1
        while start + W < T:
            start, n = start + W // 2, n + 1
        counts_ok &= num_windows(T, W) == n

    rng = np.random.default_rng(11)
    m = tiny_model(seed=11)
    Tc = 20
    q = random_queries(rng, 5, Tc, 32, 32)
    a = rng.random((Tc, 3, 32, 32)).astype(np.float32)
    causal = True
    for change_at in (8, 12, 16):
        b = a.copy()
        b[change_at:] = rng.random(b[change_at:].shape)
        ta, tb = OnlineTracker(m, q, W), OnlineTracker(m, q, W)
        for t in range(change_at):
            ea, eb = ta.push(t, a[t]), tb.push(t, b[t])
            if ea is not None:
                causal &= all(np.array_equal(x, y) for x, y in zip(ea, eb))

    v = rng.random((W, 3, 32, 32)).astype(np.float32)
    q1 = random_queries(rng, 5, W, 32, 32)
    res = track_online(m, v, q1, window=W)
    with torch.no_grad():
        vt, qt = torch.from_numpy(v)[None], torch.from_numpy(q1)[None]
        ref = m.iterate(m.pyramid(vt), qt, TrackState.init(qt, W), m.cfg.iters_eval)[-1]
    after = np.arange(W)[None] >= q1[:, :1].astype(int)
    dev = max(float(np.abs(res.tracks - ref.P[0].numpy())[after].max()),
              float(np.abs(res.visibility_prob - torch.sigmoid(ref.V[0]).numpy())[after].max()),
              float(np.abs(res.confidence_prob - torch.sigmoid(ref.C[0]).numpy())[after].max()))
    ok = counts_ok and causal and dev < 1e-6
    _verdict(11, ok, f"window count T in [{W},{4 * W}] ok={counts_ok}; causality ok={causal}; "
                     f"one-window vs iterate max dev {dev:.1e}")
