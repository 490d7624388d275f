import numpy as np
import pytest

from textdiff.errors import EmptyTextError
from textdiff.text import HashedGaussianEncoder, TextEmbedding, tokenize


def test_tokenize_strips_punctuation_and_lowercases():
    assert tokenize("Bilateral pulmonary infection, both lungs.") == [
        "bilateral",
        "pulmonary",
        "infection",
        "both",
        "lungs",
    ]


def test_tokenize_collapses_whitespace_keeps_duplicates():
    assert tokenize("a  a") == ["a", "a"]


def test_tokenize_empty_rejected():
    with pytest.raises(EmptyTextError):
        tokenize("")
    with pytest.raises(EmptyTextError):
        tokenize("   ")
    with pytest.raises(EmptyTextError):
        tokenize("...!?")


def test_encode_is_pure():
    enc = HashedGaussianEncoder(d_text=64, seed=0)
    a = enc.encode("left lower lobe consolidation")
    b = enc.encode("left lower lobe consolidation")
    assert a.tokens == b.tokens
    assert np.array_equal(a.matrix, b.matrix)


def test_shared_token_shares_row():
    enc = HashedGaussianEncoder(d_text=64, seed=0)
    a = enc.encode("severe infection noted")
    b = enc.encode("infection of the lung")
    assert np.array_equal(a.matrix[1], b.matrix[0])


def test_encode_shape_and_row_norms():
    enc = HashedGaussianEncoder(d_text=64, seed=0)
    emb = enc.encode("one two three four five")
    assert emb.matrix.shape == (5, 64)
    norms = np.linalg.norm(emb.matrix, axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-6)


def test_encoder_seed_changes_vectors():
    a = HashedGaussianEncoder(d_text=64, seed=0).encode("infection")
    b = HashedGaussianEncoder(d_text=64, seed=1).encode("infection")
    assert not np.array_equal(a.matrix, b.matrix)


def test_distinct_tokens_near_orthogonal():
    # 1000 random distinct tokens: |cos| < 0.5 for at least 99% of pairs
    enc = HashedGaussianEncoder(d_text=64, seed=0)
    tokens = [f"tok{i}" for i in range(1000)]
    mat = enc.encode(" ".join(tokens)).matrix
    cos = mat @ mat.T
    iu = np.triu_indices(len(tokens), k=1)
    frac_ok = float(np.mean(np.abs(cos[iu]) < 0.5))
    assert frac_ok > 0.99


def test_embedding_matrix_immutable():
    enc = HashedGaussianEncoder(d_text=32, seed=0)
    emb = enc.encode("read only")
    with pytest.raises((ValueError, RuntimeError)):
        emb.matrix[0, 0] = 5.0


def test_state_digest_stable_and_distinguishes_config():
    a = HashedGaussianEncoder(d_text=64, seed=0)
    pre = a.state_digest()
    a.encode("warm the memo cache with some tokens")
    assert a.state_digest() == pre
    assert HashedGaussianEncoder(d_text=64, seed=1).state_digest() != pre
    assert HashedGaussianEncoder(d_text=32, seed=0).state_digest() != pre


def test_embedding_rejects_nan():
    with pytest.raises(Exception):
        TextEmbedding(tokens=("a",), matrix=np.array([[np.nan, 1.0]], dtype=np.float32))
