"""Acceptance suite: one test per criterion, each at its stated tolerance.

A PASS/FAIL line per criterion is printed at the end of the pytest run
(see ``conftest.py``).
"""

import dataclasses
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from _oracles import brute_force_hyperbones, random_rotation, sampled_gradcheck
from hdformer import numerics as nx
from hdformer.attention import FirstOrderAttention, HighOrderAttention, dump_attention
from hdformer.dataio import (PoseSequence, WindowedDataset, displacement_scale, load_sequence,
                             make_windows, save_sequence, sliding_window_infer, synth_dataset)
from hdformer.encoding import (encode_multiplication, encode_sub_concat, encode_subtraction,
                               encode_summation)
from hdformer.estimator import HDFormerRegressor
from hdformer.metrics import auc, mpjpe, p_mpjpe, pck
from hdformer.network import (MICRO, FULL_SCALE, HDFormerConfig, build_model,
                              configure_stage_placement, load_checkpoint, parameter_count,
                              save_checkpoint)
from hdformer.numerics import Tensor, gradcheck
from hdformer.skeleton import (Hyperbone, build_skeleton, enumerate_hyperbones, load_topology,
                               random_tree)
from hdformer.training import LossConfig, OptimizerConfig, evaluate_mpjpe, train

import test_numerics


def _linear_map(rng, c_in, c_out):
    W = Tensor(rng.standard_normal((c_in, c_out)))
    b = Tensor(rng.standard_normal(c_out))
    return lambda x: nx.linear(x, W, b)


def test_criterion_01_gradient_integrity():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        for name, (fn, inputs) in test_numerics._elementwise_cases(np.random.default_rng(seed)).items():
            worst = max(worst, gradcheck(fn, inputs))
    rng = np.random.default_rng(0)
    x, w, b = [Tensor(rng.standard_normal(s), requires_grad=True) for s in ((1, 8, 2, 3), (5, 3, 4), (4,))]
    g = Tensor(rng.standard_normal((1, 4, 2, 4)))
    worst = max(worst, gradcheck(lambda: (nx.temporal_conv(x, w, b, stride=2) * g).sum(), [x, w, b]))
    u = Tensor(rng.standard_normal((1, 4, 2, 3)), requires_grad=True)
    gu = Tensor(rng.standard_normal((1, 9, 2, 3)))
    worst = max(worst, gradcheck(lambda: (nx.temporal_upsample_bilinear(u, 9) * gu).sum(), [u]))
    s = Tensor(rng.standard_normal((3, 7)), requires_grad=True)
    gs = Tensor(rng.standard_normal((3, 7)))
    worst = max(worst, gradcheck(lambda: (nx.softmax_lastdim(s) * gs).sum(), [s]))
    a, m = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True), Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
    worst = max(worst, gradcheck(lambda: (nx.matmul(a, m) * nx.matmul(a, m)).sum(), [a, m]))

    # end-to-end micro model: every parameter tensor and the input
    model = build_model(MICRO)
    assert (MICRO.frames, MICRO.joints, MICRO.depth) == (8, 5, 1)
    xin = Tensor(rng.standard_normal((1, 8, 5, 2)))
    wout = Tensor(rng.standard_normal((1, 8, 5, 3)))
    named = list(model.named_parameters()) + [("input", xin)]
    per = sampled_gradcheck(lambda: (model.forward(xin) * wout).sum(), named, per_tensor=3)
    worst = max(worst, max(per.values()))
    elapsed = time.perf_counter() - start
    assert worst < 1e-4
    assert elapsed < 60.0


def test_criterion_02_hyperbone_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(2, 11))
        max_order = int(rng.integers(2, 6))
        spec = random_tree(n, rng)
        g = build_skeleton(spec)
        got = [hb.path for hb in enumerate_hyperbones(g, max_order).flat]
        assert got == brute_force_hyperbones(n, spec.edges, max_order)


def test_criterion_03_encoder_algebra():
    g = load_topology("h36m")
    paths = [hb for hb in enumerate_hyperbones(g, 5).flat if hb.order >= 3]
    rng = np.random.default_rng(3)
    C = 4
    for _ in range(50):
        hb = paths[rng.integers(len(paths))]
        Z = rng.standard_normal((17, C))
        f = _linear_map(rng, C, C)
        maps = {hb.order: _linear_map(rng, (hb.order - 1) * C, C)}

        # subtraction: only the endpoints matter
        Z2 = Z.copy()
        interior = list(hb.path[1:-1])
        Z2[interior] = rng.standard_normal((len(interior), C))
        full = encode_subtraction(Tensor(Z), hb, f).data
        ends = encode_subtraction(Tensor(Z2), Hyperbone((hb.start, hb.end)), f).data
        assert np.abs(full - ends).max() <= 1e-12

        # summation: permuting the path's joint features changes nothing
        perm = rng.permutation(hb.order)
        Zp = Z.copy()
        Zp[list(hb.path)] = Z[np.array(hb.path)[perm]]
        a = encode_summation(Tensor(Z), hb, f).data
        b = encode_summation(Tensor(Zp), hb, f).data
        assert np.abs(a - b).max() <= 1e-12

        # sub-concat: a common offset cancels
        offset = rng.standard_normal(C) * 10
        a = encode_sub_concat(Tensor(Z), hb, maps).data
        b = encode_sub_concat(Tensor(Z + offset), hb, maps).data
        assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(a).max())

        # multiplication: a zero channel on any path joint zeroes that channel
        Zz = Z.copy()
        ch = int(rng.integers(C))
        Zz[hb.path[int(rng.integers(hb.order))], ch] = 0.0
        out = encode_multiplication(Tensor(Zz), hb, lambda x: x).data
        assert abs(out[ch]) <= 1e-12


def test_criterion_04_attention_contracts():
    rng = np.random.default_rng(4)
    g = load_topology("h36m")
    idx = enumerate_hyperbones(g, 5)
    C, S = 6, 3
    z = Tensor(rng.standard_normal((2, 3, 17, C)))

    foa = FirstOrderAttention(C, S, g.adjacency, rng)
    foa.psi.data[:] = rng.standard_normal((17, 17)) * 3
    attn = nx.softmax_lastdim(foa.logits(z)).data
    assert np.abs(attn.sum(-1) - 1).max() <= 1e-9

    hoa = HighOrderAttention(C, S, idx, rng)
    hoa.record = True
    hoa.forward(z)
    assert hoa.last_attention.shape == (17, idx.M) == (17, 44)
    H = hoa.encoder(z)
    scores = nx.matmul(nx.reshape(hoa.w_q(z), (2, 3, 17, S, C)).transpose(0, 1, 3, 2, 4),
                       nx.reshape(hoa.w_k(H), (2, 3, idx.M, S, C)).transpose(0, 1, 3, 4, 2))
    assert scores.shape[-2:] == (17, idx.M)
    assert np.abs(nx.softmax_lastdim(scores).data.sum(-1) - 1).max() <= 1e-9

    summ = FirstOrderAttention(C, S, g.adjacency, np.random.default_rng(5))
    cat = FirstOrderAttention(C, S, g.adjacency, np.random.default_rng(6), fusion="concat")
    src = dict(summ.named_parameters())
    for name, p in cat.named_parameters():
        if name != "w_o.weight":
            p.data[:] = src[name].data
    summ.psi.data[:] = foa.psi.data
    cat.psi.data[:] = foa.psi.data
    cat.w_o.weight.data[:] = np.vstack([np.eye(C)] * S)
    assert np.abs(summ.attend(z).data - cat.attend(z).data).max() <= 1e-12
    assert np.abs(summ.forward(z).data - cat.forward(z).data).max() <= 1e-12

    model = build_model(dataclasses.replace(MICRO, hoa_placement=("all",)))
    model.set_recording(True)
    for amap in dump_attention(model, rng.standard_normal((2, 8, 5, 2))).maps:
        assert np.abs(amap.weights.sum(-1) - 1).max() <= 1e-9


@settings(max_examples=20, derandomize=True, deadline=None,
          suppress_health_check=[HealthCheck.too_slow])
@given(
    c0=st.integers(2, 6), c1=st.integers(2, 6), c2=st.integers(2, 6),
    heads=st.integers(1, 2), batch=st.integers(1, 2),
    order=st.integers(2, 4), placement=st.sampled_from([("merge",), ("down",), ("up",), ("all",)]),
    topology=st.sampled_from(["h36m", "mpi_inf_3dhp"]),
)
def test_criterion_05_shape_pipeline(c0, c1, c2, heads, batch, order, placement, topology):
    assert (FULL_SCALE.stride, FULL_SCALE.kernel) == (2, 5)
    cfg = HDFormerConfig(frames=96, joints=17, depth=2, channels=(c0, c1, c2), heads=heads,
                         order_joints=order, hoa_placement=placement, topology=topology,
                         bottom_blocks=1, merge_blocks=1, dropout=0.0)
    model = build_model(cfg)
    out = model.forward(np.zeros((batch, 96, 17, 2)))
    assert model.trace == [96, 48, 24, 48, 96]
    assert out.shape == (batch, 96, 17, 3)


def _overfit(schedule_steps, stop=None, sequences=32, seed=0):
    g = load_topology("toy5")
    s2, s3 = synth_dataset(g, sequences, 8, seed=seed)
    ds = make_windows(s2, s3, 8, 8)
    est = HDFormerRegressor(frames=8, topology="toy5", depth=1, channels=(8, 16), heads=2,
                            bottom_blocks=1, merge_blocks=1, order_joints=3, dropout=0.0,
                            lr=5e-3, epochs=schedule_steps, milestones=(int(schedule_steps * 0.75),),
                            batch_size=32, max_steps=stop or schedule_steps, random_state=seed)
    est.fit(ds.x, ds.y)
    return est, ds, displacement_scale(ds.y, g.root)


def test_criterion_06_tiny_overfit():
    start = time.perf_counter()
    steps = 600
    est, ds, scale = _overfit(steps)
    assert len(ds) == 32 and est.report_.steps == steps <= 2000
    err = est.training_mpjpe(ds.x, ds.y)
    elapsed = time.perf_counter() - start
    print(f"\ntiny-overfit: MPJPE {err:.3f} vs scale {scale:.3f} ({100 * err / scale:.2f}%), "
          f"{steps} steps, {elapsed:.1f}s")
    assert err < 0.05 * scale
    again, _, _ = _overfit(steps, stop=40)
    assert again.report_.step_losses == est.report_.step_losses[:40]
    assert elapsed < 600


def test_criterion_07_ablation_surface():
    rng = np.random.default_rng(7)
    ds = WindowedDataset(rng.standard_normal((4, 8, 5, 2)), rng.standard_normal((4, 8, 5, 3)))
    variants = [configure_stage_placement(MICRO, p) for p in (["down"], ["up"], ["merge"], ["all"])]
    variants += [dataclasses.replace(MICRO, encoder=m)
                 for m in ("subtraction", "summation", "multiplication", "concatenation", "sub_concat")]
    variants += [dataclasses.replace(MICRO, use_psi=False),
                 dataclasses.replace(MICRO, pos_encoding=True),
                 dataclasses.replace(MICRO, fusion="concat")]
    opt = OptimizerConfig(epochs=1, milestones=(), batch_size=4, max_steps=1)
    for cfg in variants:
        model = build_model(cfg)
        rep = train(model, ds, opt, LossConfig(), np.random.default_rng(0))
        assert rep.steps == 1
        assert np.isfinite(evaluate_mpjpe(model, ds.x, ds.y))


def test_criterion_08_metrics():
    rng = np.random.default_rng(8)
    for _ in range(20):
        gt = rng.standard_normal((3, 17, 3)) * 200
        R = random_rotation(rng)
        pred = rng.uniform(0.2, 5.0) * gt @ R.T + rng.standard_normal(3) * 500
        assert abs(p_mpjpe(pred, gt)) <= 1e-9
    for _ in range(100):
        pred, gt = rng.standard_normal((2, 17, 3)) * 100, rng.standard_normal((2, 17, 3)) * 100
        assert p_mpjpe(pred, gt) <= mpjpe(pred, gt)
    gt = rng.standard_normal((4, 17, 3)) * 100
    far = gt.copy()
    far[..., 0] += 200.0
    assert pck(gt, gt) == 100.0 and auc(gt, gt) == 100.0
    assert pck(far, gt) == 0.0 and auc(far, gt) == 0.0


def test_criterion_09_inference_stitching():
    model = build_model(MICRO)
    T = MICRO.frames
    rng = np.random.default_rng(9)
    for length in rng.integers(T, 6 * T, size=50):
        seq = rng.standard_normal((int(length), 5, 2))
        out = sliding_window_infer(model, seq, T, step=5)
        assert out.shape == (length, 5, 3)
    const = sliding_window_infer(lambda x: np.full(x.shape[:3] + (3,), 0.1), rng.standard_normal((57, 5, 2)), T)
    assert np.all(const == 0.1)


def test_criterion_10_serialization(tmp_path):
    model = build_model(MICRO)
    rng = np.random.default_rng(10)
    for _, p in model.named_parameters():
        p.data[:] = rng.standard_normal(p.shape)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    for (_, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()

    seq = PoseSequence(rng.standard_normal((33, 17, 3)) * 1e3, "h36m", 50.0, "walk")
    save_sequence(tmp_path / "s.pose", seq)
    assert load_sequence(tmp_path / "s.pose").data.tobytes() == seq.data.tobytes()

    def run():
        ds = WindowedDataset(np.random.default_rng(1).standard_normal((6, 8, 5, 2)),
                             np.random.default_rng(2).standard_normal((6, 8, 5, 3)))
        m = build_model(dataclasses.replace(MICRO, dropout=0.2))
        r = train(m, ds, OptimizerConfig(epochs=3, milestones=(2,), batch_size=2), LossConfig(),
                  np.random.default_rng(42))
        return r.step_losses, [(e.train_loss, e.train_mpjpe, e.val_mpjpe) for e in r.epochs]

    assert run() == run()


def test_criterion_11_parameter_count():
    n = parameter_count(build_model(FULL_SCALE))
    assert abs(n - 3.7e6) <= 0.15 * 3.7e6
    from pathlib import Path

    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    assert f"{n:,}" in readme and "64, 128, 256" in readme
