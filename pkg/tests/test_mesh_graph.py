import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from talkhead.errors import (ConfigError, HeaderError, MissingFileError, NumericError, TopologyError,
                             VertexCountError)
from talkhead.mesh_graph import (GATEncoder, GATWeights, MeshTopology, MotionSequence, derive_edges,
                                 encode_motion, gat_layer, read_ptkm, read_topology, write_ptkm,
                                 write_topology)


def brute_force_edges(faces):
    seen = []
    for f in faces:
        for a, b in itertools.combinations(f, 2):
            pair = (min(a, b), max(a, b))
            if pair not in seen:
                seen.append(pair)
    return set(seen)


def test_single_triangle_edges():
    assert derive_edges([(0, 1, 2)]) == {(0, 1), (1, 2), (0, 2)}


def test_empty_faces():
    assert derive_edges([]) == set()


def test_shared_edge_counted_once():
    faces = [(0, 1, 2), (1, 2, 3)]
    edges = derive_edges(faces)
    assert len(edges) == 5
    assert edges == brute_force_edges(faces)


def test_out_of_range_face_index():
    with pytest.raises(TopologyError):
        derive_edges([(0, 1, 7)], vertex_count=4)


@given(st.lists(st.tuples(*[st.integers(0, 9)] * 3).filter(lambda f: len(set(f)) == 3), max_size=12))
def test_edges_match_brute_force(faces):
    assert derive_edges(faces, 10) == brute_force_edges(faces)


def test_topology_rejects_overlapping_masks():
    with pytest.raises(TopologyError):
        MeshTopology.from_faces(3, [(0, 1, 2)], lip_indices=[0], upper_face_indices=[0])


def test_topology_rejects_stored_self_loop():
    with pytest.raises(TopologyError):
        MeshTopology(3, np.array([[1, 1]]))


def test_topology_rejects_duplicate_edges():
    with pytest.raises(TopologyError):
        MeshTopology(3, np.array([[0, 1], [1, 0]]))


def _weights(d_in, d_out, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return GATWeights(torch.randn(d_in, d_out, generator=g, dtype=dtype) * 0.5,
                      torch.randn(d_out, generator=g, dtype=dtype),
                      torch.randn(d_out, generator=g, dtype=dtype))


def leaky(x):
    return x if x > 0 else 0.2 * x


def hand_gat(h, neighbours, w):
    """Direct per-node evaluation with python loops."""
    W, a_s, a_d = (t.numpy() for t in (w.weight, w.att_src, w.att_dst))
    wh = [h[u] @ W for u in range(len(h))]
    out = []
    for v in range(len(h)):
        hood = sorted(neighbours[v] | {v})
        logits = [leaky(float(a_d @ wh[v] + a_s @ wh[u])) for u in hood]
        m = max(logits)
        ex = [math.exp(x - m) for x in logits]
        z = sum(ex)
        agg = sum((e / z) * wh[u] for e, u in zip(ex, hood))
        out.append([leaky(float(x)) for x in agg])
    return np.array(out)


def test_single_node_self_loop_only():
    topo = MeshTopology(1, np.zeros((0, 2)))
    src, dst = topo.message_index()
    w = _weights(3, 2)
    h = torch.tensor([[0.3, -1.2, 0.5]], dtype=torch.float64)
    out, alpha = gat_layer(h, src, dst, w, return_attention=True)
    assert alpha.tolist() == [1.0]
    expect = torch.nn.functional.leaky_relu(h @ w.weight, 0.2)
    torch.testing.assert_close(out, expect, rtol=0, atol=1e-15)


def test_three_node_path_matches_hand_oracle():
    topo = MeshTopology(3, np.array([[0, 1], [1, 2]]))
    src, dst = topo.message_index()
    w = GATWeights(torch.tensor([[0.5, -0.25], [0.1, 0.4]], dtype=torch.float64),
                   torch.tensor([0.3, -0.7], dtype=torch.float64),
                   torch.tensor([-0.2, 0.6], dtype=torch.float64))
    h = np.array([[1.0, 2.0], [-0.5, 0.25], [0.75, -1.5]])
    got = gat_layer(torch.from_numpy(h), src, dst, w).numpy()
    expect = hand_gat(h, {0: {1}, 1: {0, 2}, 2: {1}}, w)
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 16))
def test_attention_sums_to_one(n, seed):
    rng = np.random.default_rng(seed)
    faces = [tuple(rng.choice(n, 3, replace=False)) for _ in range(n)] if n >= 3 else []
    topo = MeshTopology.from_faces(n, faces)
    src, dst = topo.message_index()
    h = torch.from_numpy(rng.normal(size=(2, n, 4)) * 3)
    _, alpha = gat_layer(h, src, dst, _weights(4, 3, seed), return_attention=True)
    sums = torch.zeros(2, n, dtype=alpha.dtype).index_add(1, dst, alpha)
    torch.testing.assert_close(sums, torch.ones_like(sums), rtol=0, atol=1e-6)


def test_nan_input_raises():
    topo = MeshTopology(2, np.array([[0, 1]]))
    src, dst = topo.message_index()
    h = torch.tensor([[0.0, float("nan")], [1.0, 1.0]], dtype=torch.float64)
    with pytest.raises(NumericError):
        gat_layer(h, src, dst, _weights(2, 2))


def test_dimension_mismatch_raises():
    topo = MeshTopology(2, np.array([[0, 1]]))
    src, dst = topo.message_index()
    with pytest.raises(ConfigError):
        gat_layer(torch.zeros(2, 5, dtype=torch.float64), src, dst, _weights(4, 2))


def grid_topology():
    # 2 x 2 grid, two triangles
    return MeshTopology.from_faces(4, [(0, 1, 2), (1, 3, 2)])


def test_encoder_matches_per_frame_loop():
    torch.manual_seed(3)
    topo = grid_topology()
    enc = GATEncoder(topo, d_graph=5, layers=2).double()
    seq = torch.randn(2, 4, 3, dtype=torch.float64)
    out = enc(seq)
    src, dst = topo.message_index()
    for t in range(2):
        h = seq[t]
        for layer in enc.layers:
            h = gat_layer(h, src, dst, layer.weights())
        torch.testing.assert_close(out[t], h, rtol=0, atol=1e-12)


def test_encoder_frame_permutation_and_independence():
    torch.manual_seed(4)
    topo = grid_topology()
    enc = GATEncoder(topo, 6, 2).double()
    seq = torch.randn(5, 4, 3, dtype=torch.float64)
    out = enc(seq)
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert torch.equal(enc(seq[perm]), out[perm])
    bumped = seq.clone()
    bumped[2] += 10.0
    other = enc(bumped)
    keep = [0, 1, 3, 4]
    assert torch.equal(other[keep], out[keep])


def test_encode_motion_shape_and_mismatch():
    topo = grid_topology()
    enc = GATEncoder(topo, 7, 2)
    seq = MotionSequence(np.zeros((3, 4, 3)), 25.0)
    assert encode_motion(seq, enc).shape == (3, 4, 7)
    with pytest.raises(ConfigError):
        encode_motion(MotionSequence(np.zeros((3, 5, 3)), 25.0), enc)


def test_self_loops_only_index():
    src, dst = grid_topology().message_index(self_loops_only=True)
    assert torch.equal(src, dst) and torch.equal(src, torch.arange(4))


def test_motion_sequence_invariants():
    with pytest.raises(ConfigError):
        MotionSequence(np.zeros((0, 3, 3)), 25.0)
    with pytest.raises(NumericError):
        MotionSequence(np.full((1, 2, 3), np.inf), 25.0)
    with pytest.raises(ConfigError):
        MotionSequence(np.zeros((1, 2, 3)), 0.0)


def test_ptkm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    seq = MotionSequence(rng.normal(size=(7, 5, 3)) * 10, 60.0)
    path = tmp_path / "a.ptkm"
    write_ptkm(path, seq)
    back = read_ptkm(path, expected_vertices=5)
    assert back.fps == 60.0
    assert back.frames.tobytes() == seq.frames.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"PTKM" and raw[4] == 1
    assert len(raw) == 5 + 12 + 7 * 5 * 3 * 4


def test_ptkm_errors(tmp_path):
    with pytest.raises(MissingFileError):
        read_ptkm(tmp_path / "missing.ptkm")
    bad = tmp_path / "bad.ptkm"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(HeaderError):
        read_ptkm(bad)
    good = tmp_path / "g.ptkm"
    write_ptkm(good, MotionSequence(np.zeros((2, 5, 3)), 25.0))
    with pytest.raises(VertexCountError, match="g.ptkm"):
        read_ptkm(good, expected_vertices=6)
    truncated = tmp_path / "t.ptkm"
    truncated.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(HeaderError):
        read_ptkm(truncated)


def test_topology_round_trip(tmp_path):
    topo = MeshTopology.from_faces(5, [(0, 1, 2), (2, 3, 4)], lip_indices=[3, 4], upper_face_indices=[0])
    write_topology(tmp_path / "t.json", topo)
    back = read_topology(tmp_path / "t.json")
    assert back.vertex_count == 5
    assert np.array_equal(back.edges, topo.edges)
    assert np.array_equal(back.lip_mask, topo.lip_mask)
    assert np.array_equal(back.upper_face_mask, topo.upper_face_mask)


def test_large_mesh_memory_is_edge_linear():
    # BIWI-sized vertex count on a strip mesh: a dense N x N attention matrix
    # would need ~2 GB in float32, the sparse path needs a few MB.
    n = 23370
    faces = np.stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=1)
    topo = MeshTopology.from_faces(n, faces)
    enc = GATEncoder(topo, 4, 1)
    out = enc(torch.zeros(1, n, 3))
    assert out.shape == (1, n, 4)
