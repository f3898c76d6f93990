import numpy as np
import pytest

from core import (Embedding, EmbeddingBatch, SimilarityMatrix, cosine_similarity_matrix, l2_normalize,
                  l2_normalize_rows, sign_matrix)
from errors import InvalidInputError, ShapeError


class TestL2Normalize:

    def test_three_four_five(self):
        out = l2_normalize(Embedding(np.array([3.0, 4.0])))
        np.testing.assert_allclose(out.values, [0.6, 0.8], atol=1e-12)
        assert out.normalized

    def test_unit_vector_unchanged(self):
        out = l2_normalize(Embedding(np.array([1.0, 0.0, 0.0])))
        np.testing.assert_array_equal(out.values, [1.0, 0.0, 0.0])

    def test_zero_vector_is_not_flagged(self):
        out = l2_normalize(Embedding(np.zeros(4)))
        np.testing.assert_array_equal(out.values, np.zeros(4))
        assert not out.normalized

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            l2_normalize(Embedding(np.array([1.0, np.nan])))

    def test_rows_return_norms(self):
        rows, norms = l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]]))
        np.testing.assert_allclose(norms.ravel(), [5.0, 2.0])
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0)


class TestCosineSimilarity:

    def test_identity_rows(self):
        eye = EmbeddingBatch(np.eye(3))
        np.testing.assert_allclose(cosine_similarity_matrix(eye, eye).scores, np.eye(3), atol=1e-12)

    def test_forty_five_degrees(self):
        s = cosine_similarity_matrix(EmbeddingBatch(np.array([[1.0, 1.0]])), EmbeddingBatch(np.array([[1.0, 0.0]])))
        assert s.scores[0, 0] == pytest.approx(1 / np.sqrt(2), abs=1e-9)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(4, 8))
        t = rng.normal(size=(4, 8))
        s = cosine_similarity_matrix(EmbeddingBatch(a), EmbeddingBatch(t)).scores
        for i in range(4):
            for j in range(4):
                dot = sum(a[i, k] * t[j, k] for k in range(8))
                na = sum(x * x for x in a[i]) ** 0.5
                nt = sum(x * x for x in t[j]) ** 0.5
                assert s[i, j] == pytest.approx(dot / (na * nt), abs=1e-6)

    def test_self_similarity_has_unit_diagonal(self):
        rows = np.random.default_rng(1).normal(size=(6, 5))
        s = cosine_similarity_matrix(EmbeddingBatch(rows), EmbeddingBatch(rows)).scores
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)

    def test_invariant_to_positive_row_scaling(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 3))
        t = rng.normal(size=(4, 3))
        scale = rng.uniform(0.1, 10.0, size=(5, 1))
        base = cosine_similarity_matrix(EmbeddingBatch(a), EmbeddingBatch(t)).scores
        scaled = cosine_similarity_matrix(EmbeddingBatch(a * scale), EmbeddingBatch(t)).scores
        np.testing.assert_allclose(base, scaled, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_similarity_matrix(EmbeddingBatch(np.ones((2, 3))), EmbeddingBatch(np.ones((2, 4))))

    def test_rectangular_shape_and_transpose(self):
        rng = np.random.default_rng(3)
        s = cosine_similarity_matrix(EmbeddingBatch(rng.normal(size=(2, 4))), EmbeddingBatch(rng.normal(size=(5, 4))))
        assert s.shape == (2, 5)
        np.testing.assert_array_equal(s.transpose().scores, s.scores.T)

    def test_out_of_range_scores_rejected(self):
        with pytest.raises(InvalidInputError):
            SimilarityMatrix(np.array([[1.5]]))


class TestSignMatrix:

    def test_size_one(self):
        np.testing.assert_array_equal(sign_matrix(1).entries, [[1.0]])

    def test_size_two(self):
        np.testing.assert_array_equal(sign_matrix(2).entries, [[1.0, -1.0], [-1.0, 1.0]])

    def test_row_sums(self):
        np.testing.assert_array_equal(sign_matrix(3).entries.sum(axis=1), [-1.0, -1.0, -1.0])

    def test_zero_rejected(self):
        with pytest.raises(InvalidInputError):
            sign_matrix(0)


class TestEmbeddingBatch:

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvalidInputError):
            EmbeddingBatch(np.ones((2, 2)), ('a', 'a'))

    def test_take_keeps_ids(self):
        batch = EmbeddingBatch(np.arange(6.0).reshape(3, 2), ('a', 'b', 'c'))
        sub = batch.take([2, 0])
        assert sub.ids == ('c', 'a')
        np.testing.assert_array_equal(sub.rows, [[4.0, 5.0], [0.0, 1.0]])
