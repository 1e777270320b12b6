import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wordmine.errors import DimensionMismatch, EmptyInput, FormatError, ZeroVector
from wordmine.vision import (
    EmbeddingGrid,
    ImageEmbedding,
    cosine_similarity,
    decode_grid,
    encode_grid,
    mine_images,
    read_embeddings,
    read_grids,
    write_embeddings,
    write_grids,
)


def test_cosine_examples():
    assert cosine_similarity([2, 0], [2, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_errors():
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


def test_cosine_matches_definition():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=8), rng.normal(size=8)
        dot = sum(x * y for x, y in zip(a, b))
        ref = dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))
        assert cosine_similarity(a, b) == pytest.approx(ref, abs=1e-12)


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_cosine_bounded_and_symmetric(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    s = cosine_similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(cosine_similarity(b, a), abs=1e-12)


def emb(i, v):
    return ImageEmbedding(i, np.asarray(v, dtype=float))


def test_identical_pool_image_ranked_first():
    rng = np.random.default_rng(1)
    sup = rng.normal(size=4)
    pool = [emb(f"p{i}", rng.normal(size=4)) for i in range(10)] + [emb("copy", sup * 3)]
    (r,) = mine_images({"a": [emb("s", sup)]}, pool, 5)
    assert r.entries[0][0] == "copy"
    assert r.entries[0][1] == pytest.approx(1.0)
    assert len(r.entries) == 5


def test_orthogonal_pool_ties_by_id():
    pool = [emb(i, v) for i, v in [("c", [0, 1, 0]), ("a", [0, 0, 1]), ("b", [0, 1, 0])]]
    (r,) = mine_images({"x": [emb("s", [1, 0, 0])]}, pool, 10)
    assert r.image_ids == ["a", "b", "c"]
    assert all(s == 0.0 for _, s in r.entries)


def test_mining_errors():
    with pytest.raises(EmptyInput):
        mine_images({"x": [emb("s", [1, 0])]}, [], 3)
    with pytest.raises(ValueError):
        mine_images({"x": [emb("s", [1, 0])]}, [emb("s", [1, 0])], 3)


def test_clustered_pool_matches_brute_force():
    rng = np.random.default_rng(2)
    centres = rng.normal(size=(5, 6)) * 3
    pool = [emb(f"p{i:03d}", centres[i % 5] + rng.normal(size=6)) for i in range(200)]
    support = {f"c{c}": [emb(f"s{c}{k}", centres[c] + rng.normal(size=6)) for k in range(3)] for c in range(5)}
    rankings = mine_images(support, pool, 30)
    for r in rankings:
        scored = []
        for p in pool:
            best = max(cosine_similarity(s.vector, p.vector) for s in support[r.class_label])
            scored.append((-best, p.image_id))
        scored.sort()
        assert r.image_ids == [i for _, i in scored[:30]]


def test_embedding_file_layout(tmp_path):
    ids = ["a", "b"]
    mat = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]])
    path = tmp_path / "x.emb"
    write_embeddings(path, ids, mat)
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    assert struct.unpack("<II", raw[4:12]) == (2, 3)
    assert raw[12:] == mat.astype("<f4").tobytes()
    assert (tmp_path / "x.emb.ids").read_text() == "a\nb\n"
    got_ids, got = read_embeddings(path)
    assert got_ids == ids
    np.testing.assert_array_equal(got, mat)


def test_embedding_file_rejects_corruption(tmp_path):
    path = tmp_path / "x.emb"
    write_embeddings(path, ["a"], np.ones((1, 2)))
    path.write_bytes(b"EMB2" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        read_embeddings(path)
    write_embeddings(path, ["a"], np.ones((1, 2)))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_embeddings(path)


def test_grid_record_layout():
    g = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    raw = encode_grid(g)
    assert raw[:4] == b"GRD1"
    assert struct.unpack("<III", raw[4:16]) == (2, 3, 4)
    assert raw[16:] == g.astype("<f4").tobytes()  # row-major by (h, w, channel)
    out, end = decode_grid(raw)
    np.testing.assert_array_equal(out, g)
    assert end == len(raw)


def test_grid_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    grids = [rng.normal(size=(2, 2, 3)), rng.normal(size=(1, 3, 3))]
    write_grids(tmp_path / "g.grd", ["x", "y"], grids)
    got = read_grids(tmp_path / "g.grd")
    assert list(got) == ["x", "y"]
    for a, b in zip(grids, got.values()):
        np.testing.assert_array_equal(a.astype(np.float32), b)


def test_grid_shape_checked():
    with pytest.raises(FormatError):
        EmbeddingGrid("g", np.ones((2, 2)))
