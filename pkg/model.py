"""
Dual-tower model: encoder -> projection MLP -> L2 normalization on each side.

Parameters rest as float32; every forward and backward pass runs in float64.
"""
import json
import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import CHECKPOINT_VERSION, EMBED_DIM, MLP_HIDDEN_MULT, NORM_EPS
from core import Embedding, EmbeddingBatch, l2_normalize_rows
from encoder_adapter import EncoderKind, EncoderSpec, get_encoder
from errors import EncoderError, GlapError, InvalidInputError, TruncatedFileError, VersionError
from loss import LogitForm, LossParams
from tensor_io import FeatureStore, read_tensor, write_tensor

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x ** 3)))


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


def _f64(x):
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class ProjectionMLP:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    PARAM_NAMES = ('W1', 'b1', 'W2', 'b2')

    def __post_init__(self):
        d_in, d_h = np.shape(self.W1)
        if np.shape(self.b1) != (d_h,) or np.shape(self.W2)[0] != d_h or np.shape(self.b2) != (np.shape(self.W2)[1],):
            raise InvalidInputError("projection MLP shapes do not chain")

    @property
    def d_in(self):
        return self.W1.shape[0]

    @property
    def d_out(self):
        return self.W2.shape[1]

    @classmethod
    def init(cls, d_in, d_out, rng, hidden_mult=MLP_HIDDEN_MULT):
        d_h = hidden_mult * d_in
        W1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_h))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d_out))
        return cls(W1.astype(np.float32), np.zeros(d_h, np.float32),
                   W2.astype(np.float32), np.zeros(d_out, np.float32))

    @classmethod
    def identity(cls, d):
        """gelu(x) - gelu(-x) == x, so [I, -I] then [I; -I] passes rows through."""
        eye = np.eye(d, dtype=np.float32)
        return cls(np.hstack([eye, -eye]), np.zeros(2 * d, np.float32),
                   np.vstack([eye, -eye]), np.zeros(d, np.float32))

    def forward(self, x):
        x = _f64(x)
        z1 = x @ _f64(self.W1) + _f64(self.b1)
        a1 = gelu(z1)
        y = a1 @ _f64(self.W2) + _f64(self.b2)
        return y, (x, z1, a1)

    def backward(self, cache, grad_y):
        x, z1, a1 = cache
        grads = {
            'W2': a1.T @ grad_y,
            'b2': grad_y.sum(axis=0),
        }
        grad_z1 = (grad_y @ _f64(self.W2).T) * gelu_grad(z1)
        grads['W1'] = x.T @ grad_z1
        grads['b1'] = grad_z1.sum(axis=0)
        return grads, grad_z1 @ _f64(self.W1).T

    def tensors(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}


@dataclass(frozen=True)
class TowerParams:
    audio_spec: EncoderSpec
    text_spec: EncoderSpec
    audio_weights: Dict[str, np.ndarray]
    text_weights: Dict[str, np.ndarray]
    proj_a: ProjectionMLP
    proj_t: ProjectionMLP
    loss_params: LossParams

    def __post_init__(self):
        if self.proj_a.d_out != self.proj_t.d_out:
            raise InvalidInputError(f"tower output dims differ: {self.proj_a.d_out} vs {self.proj_t.d_out}")
        if self.proj_a.d_in != self.audio_spec.output_dim or self.proj_t.d_in != self.text_spec.output_dim:
            raise InvalidInputError("projection input width must equal the encoder output_dim")

    @property
    def embed_dim(self):
        return self.proj_a.d_out

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for k, v in self.audio_weights.items():
            out[f'audio_encoder.{k}'] = v
        for k, v in self.text_weights.items():
            out[f'text_encoder.{k}'] = v
        for k, v in self.proj_a.tensors().items():
            out[f'proj_a.{k}'] = v
        for k, v in self.proj_t.tensors().items():
            out[f'proj_t.{k}'] = v
        return out

    def trainable_names(self) -> List[str]:
        names = []
        for name in self.named_tensors():
            if name.startswith('audio_encoder.') and not self.audio_spec.trainable:
                continue
            if name.startswith('text_encoder.') and not self.text_spec.trainable:
                continue
            names.append(name)
        return names

    def with_tensors(self, tensors: Dict[str, np.ndarray], loss_params: LossParams = None) -> "TowerParams":
        merged = dict(self.named_tensors())
        merged.update(tensors)

        def section(prefix):
            return {k[len(prefix):]: v for k, v in merged.items() if k.startswith(prefix)}

        return replace(
            self,
            audio_weights=section('audio_encoder.'),
            text_weights=section('text_encoder.'),
            proj_a=ProjectionMLP(**section('proj_a.')),
            proj_t=ProjectionMLP(**section('proj_t.')),
            loss_params=loss_params or self.loss_params,
        )


def init_tower_params(audio_spec: EncoderSpec, text_spec: EncoderSpec, embed_dim=EMBED_DIM,
                      seed=0, hidden_mult=MLP_HIDDEN_MULT, loss_params: LossParams = None) -> TowerParams:
    rng = np.random.default_rng(seed)
    return TowerParams(
        audio_spec=audio_spec,
        text_spec=text_spec,
        audio_weights=get_encoder(audio_spec).init_weights(rng),
        text_weights=get_encoder(text_spec).init_weights(rng),
        proj_a=ProjectionMLP.init(audio_spec.output_dim, embed_dim, rng, hidden_mult),
        proj_t=ProjectionMLP.init(text_spec.output_dim, embed_dim, rng, hidden_mult),
        loss_params=loss_params or LossParams.init(),
    )


# ========================
# Single-item encoders
# ========================

def encode_audio(features, spec: EncoderSpec, weights) -> Embedding:
    adapter = get_encoder(spec)
    feats = adapter.featurize(features)
    return Embedding(adapter.forward(feats[None, :], weights)[0])


def encode_text(text, spec: EncoderSpec, weights) -> Embedding:
    if spec.kind is EncoderKind.PASSTHROUGH:
        raise InvalidInputError("passthrough text towers take precomputed rows, not captions")
    adapter = get_encoder(spec)
    feats = adapter.featurize(text)
    return Embedding(adapter.forward(feats[None, :], weights)[0])


def hashed_counts(text, spec: EncoderSpec) -> np.ndarray:
    """Normalized trigram count vector before the trainable map."""
    return get_encoder(spec).featurize(text)


# ========================
# Batched towers
# ========================

def _batch_ids(records) -> Tuple[str, ...]:
    """Record ids, with later repeats of a resampled record suffixed by slot."""
    seen = set()
    ids = []
    for slot, r in enumerate(records):
        ids.append(r.id if r.id not in seen else f"{r.id}@{slot}")
        seen.add(r.id)
    return tuple(ids)


def _featurize(adapter, records, raw_of):
    feats = []
    for r in records:
        try:
            feats.append(adapter.featurize(raw_of(r)))
        except GlapError as e:
            raise EncoderError(r.id, e) from e
    return np.stack(feats)


def _text_input(spec, store):
    if spec.kind is EncoderKind.PASSTHROUGH:
        def raw_of(r):
            if r.text_ref is None:
                raise InvalidInputError("passthrough text tower requires a text_ref")
            return store.read_row(r.text_ref)
        return raw_of
    return lambda r: r.caption


def _tower_forward(adapter, weights, proj, feats):
    h = adapter.forward(feats, weights)
    y, proj_cache = proj.forward(h)
    e, norms = l2_normalize_rows(y)
    return e, (feats, proj_cache, e, norms)


def forward_towers(records, params: TowerParams, store: FeatureStore):
    """Forward both towers; returns (audio batch, text batch, cache for backward_towers)."""
    if not records:
        raise InvalidInputError("cannot encode an empty record list")
    audio = get_encoder(params.audio_spec)
    text = get_encoder(params.text_spec)
    feats_a = _featurize(audio, records, lambda r: store.read_row(r.feature_ref))
    feats_t = _featurize(text, records, _text_input(params.text_spec, store))

    e_a, cache_a = _tower_forward(audio, params.audio_weights, params.proj_a, feats_a)
    e_t, cache_t = _tower_forward(text, params.text_weights, params.proj_t, feats_t)
    ids = _batch_ids(records)
    return EmbeddingBatch(e_a, ids), EmbeddingBatch(e_t, ids), (cache_a, cache_t)


def forward_pair_batch(records, params: TowerParams, store: FeatureStore):
    audio, text, _ = forward_towers(records, params, store)
    return audio, text


def embed_audio(records, params: TowerParams, store: FeatureStore) -> EmbeddingBatch:
    """Audio tower only, for zero-shot items whose captions are labels."""
    if not records:
        raise InvalidInputError("cannot encode an empty record list")
    audio = get_encoder(params.audio_spec)
    feats = _featurize(audio, records, lambda r: store.read_row(r.feature_ref))
    e, _ = _tower_forward(audio, params.audio_weights, params.proj_a, feats)
    return EmbeddingBatch(e, _batch_ids(records))


def _normalize_backward(e, norms, grad_e):
    safe = np.maximum(norms, NORM_EPS)
    radial = np.where(norms > NORM_EPS, (e * grad_e).sum(axis=1, keepdims=True), 0.0)
    return (grad_e - e * radial) / safe


def _tower_backward(adapter, weights, proj, cache, grad_e, prefix, proj_prefix):
    feats, proj_cache, e, norms = cache
    grad_y = _normalize_backward(e, norms, grad_e)
    proj_grads, grad_h = proj.backward(proj_cache, grad_y)
    grads = {f'{proj_prefix}.{k}': v for k, v in proj_grads.items()}
    for k, v in adapter.backward(feats, weights, grad_h).items():
        grads[f'{prefix}.{k}'] = v
    return grads


def backward_towers(cache, grad_audio, grad_text, params: TowerParams) -> Dict[str, np.ndarray]:
    """Gradients of every trainable tensor given dL/d(normalized embeddings)."""
    cache_a, cache_t = cache
    grads = _tower_backward(get_encoder(params.audio_spec), params.audio_weights, params.proj_a,
                            cache_a, _f64(grad_audio), 'audio_encoder', 'proj_a')
    grads.update(_tower_backward(get_encoder(params.text_spec), params.text_weights, params.proj_t,
                                 cache_t, _f64(grad_text), 'text_encoder', 'proj_t'))
    return grads


class TextTower:
    """Text side of a trained model, for embedding arbitrary strings such as prompts."""

    def __init__(self, params: TowerParams):
        if params.text_spec.kind is EncoderKind.PASSTHROUGH:
            raise InvalidInputError("a passthrough text tower cannot embed free text")
        self.params = params
        self.adapter = get_encoder(params.text_spec)

    def embed_texts(self, texts: Sequence[str]) -> EmbeddingBatch:
        feats = np.stack([self.adapter.featurize(t) for t in texts])
        e, _ = _tower_forward(self.adapter, self.params.text_weights, self.params.proj_t, feats)
        return EmbeddingBatch(e, tuple(f"text{k}" for k in range(len(texts))))


# ========================
# Checkpoints
# ========================

META_FILE = 'meta.json'
META_REQUIRED = ('tensors', 'audio_encoder', 'text_encoder', 'loss_params')
TENSOR_SUFFIX = '.glapt'


def save_checkpoint(params: TowerParams, path, step=0, config_hash='', logit_form=LogitForm.SIGLIP_CONSISTENT):
    """Directory checkpoint: meta.json plus one GLAP-TENSOR file per parameter."""
    os.makedirs(path, exist_ok=True)
    tensors = {}
    for name, value in params.named_tensors().items():
        filename = name + TENSOR_SUFFIX
        write_tensor(os.path.join(path, filename), value)
        tensors[name] = filename
    meta = {
        'version': f'{CHECKPOINT_VERSION[0]}.{CHECKPOINT_VERSION[1]}',
        'step': int(step),
        'config_hash': config_hash,
        'logit_form': LogitForm(logit_form).value,
        'audio_encoder': params.audio_spec.to_dict(),
        'text_encoder': params.text_spec.to_dict(),
        'loss_params': {'u': params.loss_params.u, 'beta': params.loss_params.beta},
        'tensors': tensors,
    }
    with open(os.path.join(path, META_FILE), 'w', encoding='utf-8') as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint_meta(path) -> dict:
    meta_path = os.path.join(path, META_FILE)
    if not os.path.exists(meta_path):
        raise TruncatedFileError(f"checkpoint {path} has no {META_FILE}")
    try:
        with open(meta_path, 'r', encoding='utf-8') as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as e:
        raise TruncatedFileError(f"{meta_path}: unreadable metadata ({e.msg})") from None
    try:
        major = int(str(meta['version']).split('.')[0])
    except (KeyError, ValueError):
        raise VersionError(f"{meta_path}: missing or malformed version") from None
    if major > CHECKPOINT_VERSION[0]:
        raise VersionError(f"checkpoint version {meta['version']} is newer than supported "
                           f"{CHECKPOINT_VERSION[0]}.{CHECKPOINT_VERSION[1]}")
    missing = [k for k in META_REQUIRED if k not in meta]
    if missing:
        raise TruncatedFileError(f"{meta_path}: missing key(s) {', '.join(missing)}")
    return meta


def load_checkpoint(path) -> TowerParams:
    meta = load_checkpoint_meta(path)
    tensors = {name: read_tensor(os.path.join(path, filename)) for name, filename in meta['tensors'].items()}
    try:
        audio_spec = EncoderSpec.from_dict(meta['audio_encoder'])
        text_spec = EncoderSpec.from_dict(meta['text_encoder'])
    except (KeyError, TypeError, ValueError):
        raise TruncatedFileError(f"checkpoint {path}: malformed encoder description") from None

    def section(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    for prefix in ('proj_a.', 'proj_t.'):
        absent = [name for name in ProjectionMLP.PARAM_NAMES if name not in section(prefix)]
        if absent:
            raise TruncatedFileError(f"checkpoint {path}: no {prefix}{absent[0]} tensor")
    try:
        loss_params = LossParams(u=float(meta['loss_params']['u']), beta=float(meta['loss_params']['beta']))
    except (KeyError, TypeError, ValueError):
        raise TruncatedFileError(f"checkpoint {path}: malformed loss_params") from None

    return TowerParams(
        audio_spec=audio_spec,
        text_spec=text_spec,
        audio_weights=section('audio_encoder.'),
        text_weights=section('text_encoder.'),
        proj_a=ProjectionMLP(**{k: v for k, v in section('proj_a.').items() if k in ProjectionMLP.PARAM_NAMES}),
        proj_t=ProjectionMLP(**{k: v for k, v in section('proj_t.').items() if k in ProjectionMLP.PARAM_NAMES}),
        loss_params=loss_params,
    )
