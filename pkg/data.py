"""
Training manifest and group-balanced batch sampling.

The manifest is UTF-8 JSON lines, one audio-text pair per line:
    {"id", "group", "domain", "language", "caption", "feature_ref": {"path", "row"}}
plus an optional "text_ref" {"path", "row"} used by passthrough text towers.

Records fall into four sampling groups (sound + music, English speech,
Chinese speech, other-language speech); batches draw the groups equally
regardless of how large each one is.
"""
import enum
import json
import os
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from config import SOURCE_ID_SEP
from errors import ConfigError, InvalidInputError, ManifestError


class Group(str, enum.Enum):
    SOUND_MUSIC = 'SOUND_MUSIC'
    SPEECH_EN = 'SPEECH_EN'
    SPEECH_ZH = 'SPEECH_ZH'
    SPEECH_OTHER = 'SPEECH_OTHER'


class Domain(str, enum.Enum):
    SPEECH = 'speech'
    SOUND = 'sound'
    MUSIC = 'music'


class Strategy(str, enum.Enum):
    PER_EXAMPLE_UNIFORM = 'PER_EXAMPLE_UNIFORM'
    PER_BATCH_STRATIFIED = 'PER_BATCH_STRATIFIED'


GROUP_ORDER = (Group.SOUND_MUSIC, Group.SPEECH_EN, Group.SPEECH_ZH, Group.SPEECH_OTHER)
SPEECH_GROUPS = frozenset(GROUP_ORDER[1:])
STRATEGY_ALIASES = {'uniform': Strategy.PER_EXAMPLE_UNIFORM, 'stratified': Strategy.PER_BATCH_STRATIFIED}

REQUIRED_FIELDS = ('id', 'group', 'domain', 'language', 'caption', 'feature_ref')
OPTIONAL_FIELDS = ('text_ref',)


@dataclass(frozen=True)
class FeatureRef:
    path: str
    row: int

    def to_dict(self):
        return {'path': self.path, 'row': self.row}


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    group: Group
    domain: Domain
    language: str
    caption: str
    feature_ref: FeatureRef
    text_ref: Optional[FeatureRef] = None

    @property
    def source_id(self):
        return source_id(self.id)

    def to_dict(self):
        out = {
            'id': self.id,
            'group': self.group.value,
            'domain': self.domain.value,
            'language': self.language,
            'caption': self.caption,
            'feature_ref': self.feature_ref.to_dict(),
        }
        if self.text_ref is not None:
            out['text_ref'] = self.text_ref.to_dict()
        return out


def source_id(record_id: str) -> str:
    """'clip7#2' -> 'clip7'; ids without the separator are their own source."""
    head, sep, _ = record_id.rpartition(SOURCE_ID_SEP)
    return head if sep else record_id


def parse_strategy(name) -> Strategy:
    if isinstance(name, Strategy):
        return name
    key = str(name)
    if key.lower() in STRATEGY_ALIASES:
        return STRATEGY_ALIASES[key.lower()]
    try:
        return Strategy(key.upper())
    except ValueError:
        raise ConfigError(f"Unknown sampler strategy: {name}") from None


# ========================
# Manifest parsing
# ========================

def _parse_ref(value, field_name, line_no):
    if not isinstance(value, dict) or set(value) != {'path', 'row'}:
        raise ManifestError(f"{field_name} must be an object with exactly 'path' and 'row'", line_no)
    path, row = value['path'], value['row']
    if not isinstance(path, str) or not path:
        raise ManifestError(f"{field_name}.path must be a non-empty string", line_no)
    if isinstance(row, bool) or not isinstance(row, int) or row < 0:
        raise ManifestError(f"{field_name}.row must be a non-negative integer", line_no)
    return FeatureRef(path, row)


def _parse_record(obj, line_no):
    if not isinstance(obj, dict):
        raise ManifestError("expected a JSON object", line_no)
    missing = [f for f in REQUIRED_FIELDS if f not in obj]
    if missing:
        raise ManifestError(f"missing field(s): {', '.join(missing)}", line_no)
    extra = sorted(set(obj) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS))
    if extra:
        raise ManifestError(f"unknown field(s): {', '.join(extra)}", line_no)

    for name in ('id', 'language', 'caption'):
        if not isinstance(obj[name], str) or not obj[name]:
            raise ManifestError(f"{name} must be a non-empty string", line_no)
    try:
        group = Group(obj['group'])
    except ValueError:
        raise ManifestError(f"unknown group {obj['group']!r}", line_no) from None
    try:
        domain = Domain(obj['domain'])
    except ValueError:
        raise ManifestError(f"unknown domain {obj['domain']!r}", line_no) from None

    if domain is Domain.SPEECH and group not in SPEECH_GROUPS:
        raise ManifestError(f"domain=speech is inconsistent with group={group.value}", line_no)
    if domain is not Domain.SPEECH and group is not Group.SOUND_MUSIC:
        raise ManifestError(f"domain={domain.value} is inconsistent with group={group.value}", line_no)

    text_ref = _parse_ref(obj['text_ref'], 'text_ref', line_no) if obj.get('text_ref') is not None else None
    return ManifestRecord(
        id=obj['id'],
        group=group,
        domain=domain,
        language=obj['language'],
        caption=obj['caption'],
        feature_ref=_parse_ref(obj['feature_ref'], 'feature_ref', line_no),
        text_ref=text_ref,
    )


def parse_manifest(lines: Iterable) -> List[ManifestRecord]:
    """Validate JSON lines (str or UTF-8 bytes) into records; every error names its 1-based line number."""
    records = []
    seen = {}
    for line_no, line in enumerate(lines, 1):
        if isinstance(line, bytes):
            try:
                line = line.decode('utf-8')
            except UnicodeDecodeError as e:
                raise ManifestError(f"invalid UTF-8 at byte {e.start}", line_no) from None
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid JSON: {e.msg}", line_no) from None
        record = _parse_record(obj, line_no)
        if record.id in seen:
            raise ManifestError(f"duplicate id {record.id!r} (first seen on line {seen[record.id]})", line_no)
        seen[record.id] = line_no
        records.append(record)
    return records


def _rebase(ref, base_dir):
    if ref is None or os.path.isabs(ref.path):
        return ref
    return FeatureRef(os.path.normpath(os.path.join(base_dir, ref.path)), ref.row)


def load_manifest(path) -> List[ManifestRecord]:
    """Parse a manifest file; relative feature paths resolve against its directory."""
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    try:
        with open(path, 'rb') as fh:
            records = parse_manifest(fh)
    except OSError as e:
        raise ConfigError(f"cannot read manifest {path}: {e.strerror or e}") from None
    base_dir = os.path.dirname(os.path.abspath(path))
    return [replace(r, feature_ref=_rebase(r.feature_ref, base_dir), text_ref=_rebase(r.text_ref, base_dir))
            for r in records]


def serialize_manifest(records: Iterable[ManifestRecord]) -> List[str]:
    return [json.dumps(r.to_dict(), ensure_ascii=False) for r in records]


def write_manifest(path, records):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        for line in serialize_manifest(records):
            fh.write(line + '\n')


# ========================
# Group-balanced sampler
# ========================

@dataclass(frozen=True)
class SamplerState:
    """
    Immutable sampler position. Batch k draws from a generator seeded with
    (seed, k), so the batch sequence depends only on (seed, strategy, manifest).
    """
    seed: int
    groups: Mapping[Group, Tuple[str, ...]]
    strategy: Strategy = Strategy.PER_EXAMPLE_UNIFORM
    position: int = 0
    remainder_cursor: int = 0

    @classmethod
    def from_records(cls, records, seed, strategy=Strategy.PER_EXAMPLE_UNIFORM):
        groups: Dict[Group, List[str]] = {g: [] for g in GROUP_ORDER}
        for r in records:
            groups[r.group].append(r.id)
        return cls(seed=int(seed), groups={g: tuple(ids) for g, ids in groups.items()},
                   strategy=parse_strategy(strategy))

    def check(self):
        empty = [g.value for g in GROUP_ORDER if not self.groups.get(g)]
        if empty:
            raise ConfigError(f"sampling group(s) with no records: {', '.join(empty)}")


def _rng_for(state: SamplerState):
    return np.random.default_rng(np.random.SeedSequence([state.seed, state.position]))


def sample_batch(state: SamplerState, batch_size: int):
    """Return (record ids, next state)."""
    if batch_size < 4:
        raise ConfigError(f"batch size must be >= 4 so every group can appear, got {batch_size}")
    state.check()
    rng = _rng_for(state)
    cursor = state.remainder_cursor

    if state.strategy is Strategy.PER_EXAMPLE_UNIFORM:
        slot_groups = rng.integers(0, len(GROUP_ORDER), size=batch_size)
    else:
        counts = [batch_size // 4] * 4
        for k in range(batch_size % 4):
            counts[(cursor + k) % 4] += 1
        cursor = (cursor + batch_size % 4) % 4
        slot_groups = np.repeat(np.arange(4), counts)
        rng.shuffle(slot_groups)

    ids = []
    for g in slot_groups:
        members = state.groups[GROUP_ORDER[int(g)]]
        ids.append(members[int(rng.integers(0, len(members)))])
    return ids, replace(state, position=state.position + 1, remainder_cursor=cursor)


def epoch_iterator(state: SamplerState, batch_size: int, steps_per_epoch: int) -> Iterator[Tuple[List[str], SamplerState]]:
    """Yield exactly `steps_per_epoch` (ids, next_state) pairs; an epoch is a step count."""
    if steps_per_epoch < 1:
        raise ConfigError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    for _ in range(steps_per_epoch):
        ids, state = sample_batch(state, batch_size)
        yield ids, state


def group_frequencies(batches, records) -> pd.DataFrame:
    """Per-group draw counts and frequencies over a sequence of id batches."""
    group_of = {r.id: r.group.value for r in records}
    drawn = pd.Series([group_of[i] for batch in batches for i in batch], dtype='object')
    counts = drawn.value_counts().reindex([g.value for g in GROUP_ORDER], fill_value=0)
    table = pd.DataFrame({'group': counts.index, 'count': counts.values})
    total = max(int(table['count'].sum()), 1)
    table['frequency'] = table['count'] / total
    return table


def records_by_id(records) -> Dict[str, ManifestRecord]:
    index = {}
    for r in records:
        if r.id in index:
            raise InvalidInputError(f"duplicate record id {r.id!r}")
        index[r.id] = r
    return index
