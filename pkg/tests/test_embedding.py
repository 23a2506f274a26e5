import struct

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nslser.audio import save_spectrogram
from nslser.embedding import (
    EmbeddingFormatError,
    EmbeddingMatrix,
    cosine_similarity,
    embed_features,
    load_embeddings,
    save_embeddings,
    toy_embed,
    toy_projection,
)

from oracles import exact_cosine


def test_two_row_round_trip(tmp_path):
    emb = EmbeddingMatrix(("a", "b"), np.array([[1, 0, 0], [0, 1, 0]], dtype=np.float32))
    save_embeddings(emb, tmp_path / "e.bin")
    back = load_embeddings(tmp_path / "e.bin")
    assert back.ids == ("a", "b")
    assert np.array_equal(back.vectors, emb.vectors)


def test_random_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    emb = EmbeddingMatrix(tuple(f"s{i:03d}" for i in range(50)), rng.standard_normal((50, 256)).astype(np.float32))
    save_embeddings(emb, tmp_path / "e.bin")
    back = load_embeddings(tmp_path / "e.bin")
    assert back.ids == emb.ids
    assert back.vectors.tobytes() == emb.vectors.tobytes()


def test_short_row_is_a_format_error(tmp_path):
    body = b"EMB1" + struct.pack("<II", 1, 256) + b"x\0" + np.ones(255, dtype="<f4").tobytes()
    (tmp_path / "bad.bin").write_bytes(body)
    with pytest.raises(EmbeddingFormatError, match="declared"):
        load_embeddings(tmp_path / "bad.bin")


def test_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(EmbeddingFormatError):
        load_embeddings(tmp_path / "bad.bin")


@pytest.mark.parametrize("ids, rows, message", [
    (("a", "a"), [[1.0], [2.0]], "duplicate"),
    (("a", "b"), [[1.0], [0.0]], "zero norm"),
    (("a",), [[np.nan]], "non-finite"),
])
def test_matrix_invariants(ids, rows, message):
    with pytest.raises(EmbeddingFormatError, match=message):
        EmbeddingMatrix(ids, np.array(rows))


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


vec = arrays(np.float64, 6, elements=st.floats(-100, 100, allow_subnormal=False))


@settings(max_examples=100, deadline=None)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, c):
    assume(np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6)
    s = cosine_similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert s == cosine_similarity(b, a)
    assert cosine_similarity(a * c, b) == pytest.approx(s, abs=1e-12)
    assert s == pytest.approx(exact_cosine(a, b), abs=1e-12)
    assert cosine_similarity(a, a * c) == pytest.approx(1.0, abs=1e-12)


def test_toy_embed_contracts():
    rng = np.random.default_rng(1)
    spec = rng.standard_normal((20, 64))
    assert np.array_equal(toy_embed(spec, 16, 3), toy_embed(spec.copy(), 16, 3))
    np.testing.assert_allclose(toy_embed(spec[rng.permutation(20)], 16, 3), toy_embed(spec, 16, 3), atol=1e-12)
    v = np.log(1e-6)
    silence = np.full((5, 64), v)
    np.testing.assert_allclose(toy_embed(silence, 16, 3), np.full(64, v) @ toy_projection(64, 16, 3))
    assert not np.allclose(toy_embed(spec, 16, 3), toy_embed(spec, 16, 4))
    with pytest.raises(ValueError):
        toy_embed(spec, 0, 0)


def test_embed_features_from_files(tmp_path):
    rng = np.random.default_rng(2)
    for sid in ("b", "a"):
        save_spectrogram(tmp_path / f"{sid}.lmel", rng.standard_normal((4, 64)))
    emb = embed_features(tmp_path, ["a", "b"], 8, 0)
    assert emb.ids == ("a", "b") and emb.dim == 8
    assert emb.vectors.dtype == np.float32
