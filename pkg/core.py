"""
Numeric foundation for both towers: embedding containers, L2 normalization,
batched cosine similarity and the pairwise sign matrix.

Inputs are accepted in any float dtype; every reduction runs in float64.
"""
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from config import COSINE_SLACK, NORM_EPS, UNIT_NORM_TOL
from errors import InvalidInputError, ShapeError


def _as_float_array(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise InvalidInputError(f"{name} has a non-finite entry at {bad}")
    return arr


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = _as_float_array(self.values, "embedding")
        if arr.ndim != 1 or arr.size < 1:
            raise ShapeError(f"embedding must be a non-empty vector, got shape {arr.shape}")
        if self.normalized and abs(np.linalg.norm(arr) - 1.0) > UNIT_NORM_TOL:
            raise InvalidInputError(f"embedding flagged normalized has norm {np.linalg.norm(arr):.8f}")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class EmbeddingBatch:
    rows: np.ndarray
    ids: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        arr = _as_float_array(self.rows, "embedding batch")
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ShapeError(f"embedding batch must be N x D with D >= 1, got {arr.shape}")
        ids = tuple(self.ids) if self.ids else tuple(str(i) for i in range(arr.shape[0]))
        if len(ids) != arr.shape[0]:
            raise ShapeError(f"{len(ids)} ids for {arr.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("ids must be unique within a batch")
        object.__setattr__(self, "rows", arr)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    def take(self, indices: Sequence[int]) -> "EmbeddingBatch":
        indices = list(indices)
        return EmbeddingBatch(self.rows[indices], tuple(self.ids[i] for i in indices))


@dataclass(frozen=True)
class SimilarityMatrix:
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ShapeError(f"similarity matrix must be 2-D, got {scores.shape}")
        if np.any(np.abs(scores) > 1.0 + COSINE_SLACK):
            raise InvalidInputError("cosine scores must lie in [-1, 1]")
        object.__setattr__(self, "scores", scores)

    @property
    def shape(self):
        return self.scores.shape

    def transpose(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.scores.T.copy())


@dataclass(frozen=True)
class SignMatrix:
    entries: np.ndarray

    @property
    def size(self):
        return self.entries.shape[0]


def l2_normalize(v: Embedding) -> Embedding:
    """Return v / max(||v||, delta); a zero vector comes back unflagged."""
    if not isinstance(v, Embedding):
        v = Embedding(v)
    norm = float(np.linalg.norm(v.values))
    out = v.values / max(norm, NORM_EPS)
    return Embedding(out, normalized=norm > NORM_EPS)


def l2_normalize_rows(x):
    """Row-wise normalization with the same zero guard; returns (rows, norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, NORM_EPS), norms


def cosine_similarity_matrix(a: EmbeddingBatch, t: EmbeddingBatch) -> SimilarityMatrix:
    a_rows = a.rows if isinstance(a, EmbeddingBatch) else _as_float_array(a, "audio batch")
    t_rows = t.rows if isinstance(t, EmbeddingBatch) else _as_float_array(t, "text batch")
    if a_rows.ndim != 2 or t_rows.ndim != 2 or a_rows.shape[1] != t_rows.shape[1]:
        raise ShapeError(f"dimension mismatch: {a_rows.shape} vs {t_rows.shape}")
    a_unit, _ = l2_normalize_rows(a_rows)
    t_unit, _ = l2_normalize_rows(t_rows)
    scores = np.clip(a_unit @ t_unit.T, -1.0, 1.0)
    return SimilarityMatrix(scores)


def sign_matrix(batch_size: int) -> SignMatrix:
    if int(batch_size) != batch_size or batch_size < 1:
        raise InvalidInputError(f"sign matrix size must be a positive integer, got {batch_size}")
    batch_size = int(batch_size)
    return SignMatrix(2.0 * np.eye(batch_size) - 1.0)
