"""Adapter layer so audio/text encoders can be swapped behind one interface.

Every encoder turns raw inputs into a fixed-width feature vector
(`featurize`) and then maps a stacked batch of features to encoder outputs
(`forward` / `backward`). The registered kinds are:
- MEANPOOL_LINEAR   (audio) mean over frames, then a linear map
- BYTE_TRIGRAM_HASH (text)  hashed byte-trigram counts, L2-normalized, then a linear map
- PASSTHROUGH       (either) precomputed embeddings, returned unchanged

Pretrained encoders can be added as further adapters and picked by name
through get_encoder().
"""
import enum
import functools
from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np

from config import NORM_EPS
from errors import ConfigError, InvalidInputError, ShapeError

FNV64_OFFSET = 0xcbf29ce484222325
FNV64_PRIME = 0x100000001b3
_MASK64 = (1 << 64) - 1


class EncoderKind(str, enum.Enum):
    MEANPOOL_LINEAR = 'MEANPOOL_LINEAR'
    BYTE_TRIGRAM_HASH = 'BYTE_TRIGRAM_HASH'
    PASSTHROUGH = 'PASSTHROUGH'


@dataclass(frozen=True)
class EncoderSpec:
    kind: EncoderKind
    input_dim: int
    output_dim: int
    trainable: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', EncoderKind(self.kind))
        except ValueError:
            raise ConfigError(f"Unknown encoder kind: {self.kind}") from None
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"encoder dims must be positive, got {self.input_dim} -> {self.output_dim}")
        if self.kind is EncoderKind.PASSTHROUGH:
            if self.input_dim != self.output_dim:
                raise ConfigError("PASSTHROUGH requires input_dim == output_dim")
            if self.trainable:
                raise ConfigError("PASSTHROUGH encoders cannot be trainable")

    def to_dict(self):
        out = asdict(self)
        out['kind'] = self.kind.value
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d['kind'], input_dim=int(d['input_dim']),
                   output_dim=int(d['output_dim']), trainable=bool(d['trainable']))


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


_gram_hash = functools.lru_cache(maxsize=1 << 16)(fnv1a_64)


def byte_trigrams(data: bytes):
    """Overlapping byte trigrams; strings shorter than three bytes form one gram."""
    if len(data) < 3:
        return [data]
    return [data[i:i + 3] for i in range(len(data) - 2)]


class EncoderAdapter:
    """Abstract encoder interface (duck-typed)."""
    def __init__(self, spec: EncoderSpec):
        self.spec = spec

    def init_weights(self, rng) -> Dict[str, np.ndarray]:
        raise NotImplementedError()

    def featurize(self, raw: Any) -> np.ndarray:
        raise NotImplementedError()

    def forward(self, feats: np.ndarray, weights: Dict[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError()

    def backward(self, feats: np.ndarray, weights: Dict[str, np.ndarray], grad_out: np.ndarray) -> Dict[str, np.ndarray]:
        raise NotImplementedError()


class LinearHeadAdapter(EncoderAdapter):
    """Shared trainable linear map from featurized inputs to encoder outputs."""
    def init_weights(self, rng):
        scale = 1.0 / np.sqrt(self.spec.input_dim)
        W = rng.normal(0.0, scale, size=(self.spec.input_dim, self.spec.output_dim))
        return {'W': W.astype(np.float32)}

    def forward(self, feats, weights):
        return np.asarray(feats, dtype=np.float64) @ np.asarray(weights['W'], dtype=np.float64)

    def backward(self, feats, weights, grad_out):
        if not self.spec.trainable:
            return {}
        return {'W': np.asarray(feats, dtype=np.float64).T @ grad_out}


class MeanPoolLinearAdapter(LinearHeadAdapter):
    """Audio: T x F frame features pooled over time."""
    def featurize(self, raw):
        frames = np.asarray(raw, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames.reshape(1, -1)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ShapeError(f"audio features must be T x F with T >= 1, got {frames.shape}")
        if frames.shape[1] != self.spec.input_dim:
            raise ShapeError(f"audio feature width {frames.shape[1]} != encoder input_dim {self.spec.input_dim}")
        if not np.all(np.isfinite(frames)):
            raise InvalidInputError("audio features contain non-finite values")
        return frames.mean(axis=0)


class ByteTrigramHashAdapter(LinearHeadAdapter):
    """Text: language-agnostic hashed byte-trigram counts."""
    def featurize(self, raw):
        data = raw.encode('utf-8') if isinstance(raw, str) else bytes(raw)
        if not data:
            raise InvalidInputError("cannot encode an empty caption")
        counts = np.zeros(self.spec.input_dim, dtype=np.float64)
        for gram in byte_trigrams(data):
            counts[_gram_hash(gram) % self.spec.input_dim] += 1.0
        return counts / max(np.linalg.norm(counts), NORM_EPS)


class PassthroughAdapter(EncoderAdapter):
    """Precomputed embeddings; a single row in, the same row out."""
    def init_weights(self, rng):
        return {}

    def featurize(self, raw):
        if isinstance(raw, (str, bytes)):
            raise InvalidInputError("passthrough encoder needs a precomputed embedding, not text")
        row = np.asarray(raw, dtype=np.float64)
        if row.ndim == 2:
            if row.shape[0] != 1:
                raise ShapeError(f"passthrough expects exactly one frame, got {row.shape[0]}")
            row = row[0]
        if row.ndim != 1 or row.shape[0] != self.spec.input_dim:
            raise ShapeError(f"passthrough row width {row.shape} != input_dim {self.spec.input_dim}")
        return row

    def forward(self, feats, weights):
        return np.asarray(feats, dtype=np.float64)

    def backward(self, feats, weights, grad_out):
        return {}


ADAPTERS = {
    EncoderKind.MEANPOOL_LINEAR: MeanPoolLinearAdapter,
    EncoderKind.BYTE_TRIGRAM_HASH: ByteTrigramHashAdapter,
    EncoderKind.PASSTHROUGH: PassthroughAdapter,
}


# Factory
def get_encoder(spec) -> EncoderAdapter:
    if not isinstance(spec, EncoderSpec):
        raise ConfigError(f"expected an EncoderSpec, got {spec!r}")
    return ADAPTERS[spec.kind](spec)
