"""Shared fixtures: a toy paired manifest with GLAP-TENSOR feature files."""
import os

import numpy as np
import pytest

from data import Domain, FeatureRef, Group, ManifestRecord, write_manifest
from tensor_io import FeatureStore, write_tensor
from train import TrainConfig

TOY_GROUPS = [
    (Group.SOUND_MUSIC, None, 'en'),
    (Group.SPEECH_EN, Domain.SPEECH, 'en'),
    (Group.SPEECH_ZH, Domain.SPEECH, 'zh'),
    (Group.SPEECH_OTHER, Domain.SPEECH, 'fr'),
]
WORDS = ['rain', 'dog', 'violin', 'engine', 'crowd', 'bird', 'piano', 'train', 'wind', 'bell',
         'door', 'drum', 'river', 'siren', 'guitar', 'kettle', 'choir', 'thunder', 'clock', 'horse']


def toy_caption(i, rng):
    words = rng.choice(WORDS, size=3, replace=False)
    return f"{words[0]} {words[1]} and {words[2]} in take {i}"


def build_toy_manifest(directory, n_pairs=64, frames=4, feat_dim=16, seed=0, captions_per_clip=1):
    """
    Write audio.glapt (n_pairs x frames x feat_dim) and manifest.jsonl into
    `directory`; record i is in group i % 4. With captions_per_clip > 1 every
    clip gets several records `clipK#c` sharing one feature row.
    """
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_pairs, frames, feat_dim)).astype(np.float32)
    write_tensor(os.path.join(directory, 'audio.glapt'), feats)

    records = []
    for i in range(n_pairs):
        group, domain, language = TOY_GROUPS[i % 4]
        if domain is None:
            domain = Domain.SOUND if i % 8 == 0 else Domain.MUSIC
        for c in range(captions_per_clip):
            rid = f"clip{i:03d}" if captions_per_clip == 1 else f"clip{i:03d}#{c}"
            records.append(ManifestRecord(rid, group, domain, language, toy_caption(i * 10 + c, rng),
                                          FeatureRef('audio.glapt', i)))
    path = os.path.join(directory, 'manifest.jsonl')
    write_manifest(path, records)
    return path


@pytest.fixture
def toy_manifest(tmp_path):
    return build_toy_manifest(str(tmp_path))


@pytest.fixture
def toy_records(toy_manifest):
    from data import load_manifest
    return load_manifest(toy_manifest)


@pytest.fixture
def store():
    return FeatureStore()


@pytest.fixture
def small_config():
    """Tiny towers and a flat lr so a handful of steps runs in milliseconds."""
    return TrainConfig(batch_size=8, epochs=1, steps_per_epoch=10, seed=1, peak_lr=1e-3,
                       lr_schedule='constant', embed_dim=16, audio_encoder_dim=16,
                       text_buckets=256, text_encoder_dim=16, log_every=0)


@pytest.fixture
def manifest_builder(tmp_path):
    """build(**kwargs) -> manifest path inside a fresh directory."""
    def build(**kwargs):
        directory = tmp_path / f"manifest{len(list(tmp_path.iterdir()))}"
        directory.mkdir()
        return build_toy_manifest(str(directory), **kwargs)
    return build
