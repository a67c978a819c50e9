import json

import numpy as np
import pytest

from hdformer import dataio
from hdformer.dataio import (PoseSequence, SynthSpec, import_text, inference_offsets, load_sequence,
                             make_windows, save_sequence, sliding_window_infer, synth_dataset,
                             synth_generate)
from hdformer.errors import ChannelMismatchError, FormatError, ShapeError, TruncationError, VersionMismatchError
from hdformer.skeleton import load_topology


@pytest.fixture
def seq3():
    return PoseSequence(np.random.default_rng(0).standard_normal((20, 17, 3)), "h36m", 50.0, "walk")


def test_pose_round_trip_bit_exact(tmp_path, seq3):
    p = tmp_path / "a.pose"
    save_sequence(p, seq3)
    back = load_sequence(p)
    assert back.data.tobytes() == seq3.data.tobytes()
    assert (back.topology, back.fps, back.action) == ("h36m", 50.0, "walk")
    save_sequence(tmp_path / "b.pose", back)
    assert (tmp_path / "b.pose").read_bytes() == p.read_bytes()


def test_truncation_names_byte_counts(tmp_path, seq3):
    p = tmp_path / "a.pose"
    save_sequence(p, seq3)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(TruncationError) as exc:
        load_sequence(p)
    expected = 20 * 17 * 3 * 8
    assert str(expected) in str(exc.value) and str(expected - 100) in str(exc.value)


def test_channel_mismatch(tmp_path, seq3):
    p = tmp_path / "a.pose"
    save_sequence(p, seq3)
    with pytest.raises(ChannelMismatchError):
        load_sequence(p, channels=2)


def test_version_and_topology_mismatch(tmp_path, seq3):
    p = tmp_path / "a.pose"
    save_sequence(p, seq3)
    raw = p.read_bytes()
    p.write_bytes(raw.replace(b"HDFPOSE 1", b"HDFPOSE 9", 1))
    with pytest.raises(VersionMismatchError):
        load_sequence(p)
    save_sequence(p, PoseSequence(seq3.data[:, :5], "h36m"))
    with pytest.raises(FormatError):
        load_sequence(p)
    save_sequence(p, PoseSequence(seq3.data, "no_such_topology"))
    with pytest.raises(FormatError):
        load_sequence(p)


def test_import_text_formats(tmp_path):
    arr = np.arange(3 * 5 * 2, dtype=float).reshape(3, 5, 2)
    (tmp_path / "k.json").write_text(json.dumps({"keypoints": arr.tolist()}))
    np.testing.assert_array_equal(import_text(tmp_path / "k.json", 5, 2, "toy5").data, arr)
    (tmp_path / "k.txt").write_text("# x y per joint\n" + "\n".join(",".join(map(str, f.ravel())) for f in arr))
    np.testing.assert_array_equal(import_text(tmp_path / "k.txt", 5, 2, "toy5").data, arr)
    with pytest.raises(FormatError):
        import_text(tmp_path / "k.txt", 4, 2)


def test_normalization_round_trip():
    x = np.random.default_rng(1).standard_normal((4, 10, 17, 3)) * 300
    scale = dataio.displacement_scale(x, 0)
    xn, root = dataio.normalize(x, 0, scale)
    assert np.all(xn[..., 0, :] == 0)
    np.testing.assert_allclose(dataio.denormalize(xn, root, scale), x, rtol=0, atol=1e-12 * np.abs(x).max())


def test_window_counts():
    a2, a3 = np.zeros((96, 5, 2)), np.zeros((96, 5, 3))
    assert len(make_windows(a2, a3, 96)) == 1
    b2, b3 = np.zeros((100, 5, 2)), np.zeros((100, 5, 3))
    assert len(make_windows(b2, b3, 96, 1)) == 5
    with pytest.warns(UserWarning):
        assert len(make_windows(np.zeros((0, 5, 2)), np.zeros((0, 5, 3)), 96)) == 0


def test_windows_never_cross_sequences():
    s2 = [np.full((20, 2, 2), k, float) for k in range(3)]
    s3 = [np.full((20, 2, 3), k, float) for k in range(3)]
    ds = make_windows(s2, s3, 8)
    assert len(ds) == 3 * len(range(0, 13, 4))
    for x, y, k in zip(ds.x, ds.y, ds.seq_ids):
        assert np.all(x == k) and np.all(y == k)


def test_inference_offsets():
    assert inference_offsets(96, 96) == [0]
    assert inference_offsets(101, 96) == [0, 5]
    assert inference_offsets(103, 96) == [0, 5, 7]
    with pytest.raises(ShapeError, match="pad"):
        inference_offsets(50, 96)


def test_stitching_single_window_and_overlap_mean():
    T = 8
    seq = np.random.default_rng(2).standard_normal((T, 3, 2))

    def model(x):
        return np.concatenate([x, x[..., :1]], axis=-1) * 2.0

    np.testing.assert_array_equal(sliding_window_infer(model, seq, T), model(seq[None])[0])
    calls = []

    def counter(x):
        calls.append(len(x))
        # value depends on the window, not just the frame
        return np.broadcast_to(np.arange(len(x))[:, None, None, None] + 1.0, x.shape[:3] + (3,)).copy()

    out = sliding_window_infer(counter, np.zeros((T + 5, 3, 2)), T)
    assert calls == [2]
    np.testing.assert_array_equal(out[:5], 1.0)
    np.testing.assert_array_equal(out[5:T], 1.5)
    np.testing.assert_array_equal(out[T:], 2.0)


def test_stitching_constant_model_and_order_independence():
    T = 8
    seq = np.random.default_rng(3).standard_normal((37, 3, 2))
    const = sliding_window_infer(lambda x: np.full(x.shape[:3] + (3,), 4.25), seq, T)
    assert np.all(const == 4.25)

    def model(x):
        return np.tanh(np.concatenate([x, x[..., :1] * x[..., 1:]], -1))

    a = sliding_window_infer(model, seq, T, batch_size=32)
    b = sliding_window_infer(model, seq, T, batch_size=1)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    assert sliding_window_infer(model, seq, T, stitch="last").shape == (37, 3, 3)


def test_synth_contracts():
    g = load_topology("h36m")
    spec = SynthSpec(g, frames=40)
    a2, a3 = synth_generate(spec, 7)
    b2, b3 = synth_generate(spec, 7)
    assert np.array_equal(a3, b3) and np.array_equal(a2, b2)
    np.testing.assert_array_equal(a2, a3[..., :2])
    for p, c in g.edges:
        L = np.linalg.norm(a3[:, c] - a3[:, p], axis=-1)
        assert np.ptp(L) < 1e-9
    n2, _ = synth_generate(SynthSpec(g, frames=40, noise=5.0), 7)
    assert not np.array_equal(n2, a2)
    s2, s3 = synth_dataset(g, 3, 16, seed=1)
    assert len(s2) == 3 and s3[0].shape == (16, 17, 3)
    assert not np.array_equal(s3[0], s3[1])
