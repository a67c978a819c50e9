import numpy as np
import pytest

from hdformer import numerics as nx
from hdformer.attention import (AttentionMap, FirstOrderAttention, HighOrderAttention,
                                dump_attention, read_attention_map, write_attention_map)
from hdformer.errors import RecordingDisabledError, ShapeError
from hdformer.network import MICRO, build_model
from hdformer.numerics import Tensor, gradcheck
from hdformer.skeleton import enumerate_hyperbones, graph_from_parents, load_topology

J4 = graph_from_parents([-1, 0, 1, 1])


def foa(heads=2, C=6, graph=J4, **kw):
    return FirstOrderAttention(C, heads, graph.adjacency, np.random.default_rng(0), **kw)


def randz(shape, seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def test_foa_rows_sum_to_one_and_psi_shape():
    blk = foa()
    blk.psi.data[:] = np.random.default_rng(2).standard_normal((4, 4)) * 5
    attn = nx.softmax_lastdim(blk.logits(randz((2, 3, 4, 6)))).data
    np.testing.assert_allclose(attn.sum(-1), 1.0, rtol=0, atol=1e-9)
    assert blk.psi.shape == blk.adjacency.shape == (4, 4)
    assert blk.w_o is None


def test_identical_values_give_identical_rows():
    blk = foa(heads=1, C=3)
    blk.w_v.weight.data[:] = 0.0
    blk.w_v.weight.data[0, :] = 1.0
    # every joint shares channel 0, so V rows are identical
    z = np.random.default_rng(3).standard_normal((1, 2, 4, 3))
    z[..., 0] = 0.7
    out = blk.attend(Tensor(z)).data
    np.testing.assert_allclose(out, 0.7, atol=1e-12)


def test_summation_of_identical_heads_is_scaled():
    C, S = 3, 3
    one = foa(heads=1, C=C)
    many = foa(heads=S, C=C)
    for name in ("w_q", "w_k", "w_v"):
        getattr(many, name).weight.data[:] = np.tile(getattr(one, name).weight.data, (1, S))
    z = randz((1, 2, 4, C))
    np.testing.assert_allclose(many.attend(z).data, S * one.attend(z).data, atol=1e-12)


def test_psi_saturation_gives_identity_attention():
    blk = FirstOrderAttention(3, 2, np.zeros((4, 4)), np.random.default_rng(0))
    blk.psi.data[:] = -1e4 * (1 - np.eye(4))
    h = randz((1, 1, 4, 3))
    attn = nx.softmax_lastdim(blk.logits(h)).data
    np.testing.assert_allclose(attn[0, 0, 0], np.eye(4), atol=1e-12)
    v = nx.reshape(blk.w_v(h), (1, 1, 4, 2, 3)).data.sum(axis=3)
    np.testing.assert_allclose(blk.attend(h).data, v, atol=1e-12)


def test_psi_shift_invariance():
    blk = foa()
    z = randz((2, 2, 4, 6))
    blk.psi.data[:] = np.random.default_rng(4).standard_normal((4, 4))
    a = blk.forward(z).data
    blk.psi.data += 3.25
    b = blk.forward(z).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_summation_equals_concat_with_stacked_identity():
    S, C = 3, 4
    rng = np.random.default_rng(5)
    s = foa(heads=S, C=C)
    c = foa(heads=S, C=C, fusion="concat")
    for (n1, p1), (n2, p2) in zip(s.named_parameters(), (kv for kv in c.named_parameters() if kv[0] != "w_o.weight")):
        assert n1 == n2
        p2.data[:] = p1.data
    s.psi.data[:] = rng.standard_normal((4, 4))
    c.psi.data[:] = s.psi.data
    c.w_o.weight.data[:] = np.vstack([np.eye(C)] * S)
    z = Tensor(rng.standard_normal((2, 3, 4, C)))
    np.testing.assert_allclose(s.attend(z).data, c.attend(z).data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.forward(z).data, c.forward(z).data, rtol=0, atol=1e-12)


def test_foa_joint_mismatch():
    with pytest.raises(ShapeError):
        foa().forward(randz((1, 1, 5, 6)))


@pytest.mark.parametrize("sharing", ["block", "head"])
def test_foa_gradcheck(sharing):
    blk = foa(heads=2, C=6, psi_sharing=sharing)
    blk.psi.data[:] = np.random.default_rng(6).standard_normal(blk.psi.shape)
    z = Tensor(np.random.default_rng(7).standard_normal((1, 2, 4, 6)), requires_grad=True)
    w = Tensor(np.random.default_rng(8).standard_normal((1, 2, 4, 6)))
    params = [p for _, p in blk.named_parameters()]
    assert any(p is blk.psi for p in params)
    assert gradcheck(lambda: (blk.forward(z) * w).sum(), [z] + params) < 1e-4


def hoa(graph=J4, order=3, C=4, heads=2, **kw):
    idx = enumerate_hyperbones(graph, order)
    return HighOrderAttention(C, heads, idx, np.random.default_rng(0), **kw), idx


def test_hoa_scores_are_j_by_m():
    blk, idx = hoa()
    blk.record = True
    z = randz((2, 3, 4, 4))
    blk.forward(z)
    assert blk.last_attention.shape == (4, idx.M)
    np.testing.assert_allclose(blk.last_attention.sum(-1), 1.0, atol=1e-9)


def test_hoa_score_memory_linear_in_m():
    g = load_topology("h36m")
    sizes = []
    for order in (2, 3, 4, 5):
        blk, idx = hoa(g, order)
        blk.record = True
        blk.forward(randz((1, 1, 17, 4)))
        sizes.append((idx.M, blk.last_attention.size))
    for M, n in sizes:
        assert n == 17 * M


def test_hoa_single_hyperbone():
    g = graph_from_parents([-1, 0])
    blk, idx = hoa(g, 2, C=3, heads=2)
    assert idx.M == 1
    h = randz((1, 2, 2, 3))
    H = randz((1, 2, 1, 3), seed=9)
    blk.record = True
    out = blk.attend(h, H).data
    assert np.all(blk.last_attention == 1.0)
    v = blk.w_v(H).data.reshape(1, 2, 1, 2, 3).sum(axis=3)
    np.testing.assert_allclose(out, np.broadcast_to(v, out.shape), atol=1e-12)


def test_hoa_rejects_empty_or_mismatched():
    blk, _ = hoa()
    with pytest.raises(ShapeError):
        blk.attend(randz((1, 1, 4, 4)), randz((1, 1, 0, 4)))
    with pytest.raises(ShapeError):
        blk.attend(randz((1, 1, 4, 4)), randz((1, 2, 3, 4)))


@pytest.mark.parametrize("mode", ["sub_concat", "summation"])
def test_hoa_gradcheck_through_encoder(mode):
    blk, _ = hoa(C=4, heads=2, encoder=mode)
    z = Tensor(np.random.default_rng(10).standard_normal((1, 2, 4, 4)), requires_grad=True)
    w = Tensor(np.random.default_rng(11).standard_normal((1, 2, 4, 4)))
    params = [p for _, p in blk.named_parameters()]
    assert gradcheck(lambda: (blk.forward(z) * w).sum(), [z] + params) < 1e-4


def test_dump_attention_contract(tmp_path):
    model = build_model(MICRO)
    x = np.random.default_rng(0).standard_normal((2, 8, 5, 2))
    with pytest.raises(RecordingDisabledError):
        dump_attention(model, x)
    model.set_recording(True)
    d1 = dump_attention(model, x)
    d2 = dump_attention(model, x)
    assert len(d1) == len(list(model.attention_blocks()))
    for a, b in zip(d1.maps, d2.maps):
        assert np.array_equal(a.weights, b.weights)
        np.testing.assert_allclose(a.weights.sum(-1), 1.0, atol=1e-6)
        if a.kind == "high_order":
            assert a.weights.shape == (5, model.index.M)
            assert len(a.legend) == model.index.M
        else:
            assert a.weights.shape == (5, 5)
    p = tmp_path / "m.attn"
    write_attention_map(p, d1[0])
    back = read_attention_map(p)
    assert back.block == d1[0].block and np.array_equal(back.weights, d1[0].weights)


def test_attention_map_round_trip_with_legend(tmp_path):
    amap = AttentionMap("merge.0.hoa", "high_order", np.random.default_rng(0).random((3, 2)),
                        [[0, 1], [1, 2]])
    write_attention_map(tmp_path / "a.attn", amap)
    back = read_attention_map(tmp_path / "a.attn")
    assert back.legend == amap.legend and np.array_equal(back.weights, amap.weights)
