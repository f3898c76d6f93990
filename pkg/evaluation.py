"""
Evaluation: cross-modal retrieval (R@k, mAP10), zero-shot classification
with domain prompts, and multi-label mAP.

Rankings sort scores descending and break ties by ascending gallery index,
so every metric is deterministic and matches the brute-force oracles below.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import MAP_DEPTH, PROMPT_TEMPLATES, RECALL_THRESHOLDS
from core import EmbeddingBatch, SimilarityMatrix, cosine_similarity_matrix
from data import Domain
from errors import ConfigError, InvalidInputError, ShapeError
from model import forward_pair_batch

TEXT_TO_AUDIO = 'text_to_audio'
AUDIO_TO_TEXT = 'audio_to_text'


def _matrix(S):
    scores = S.scores if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"expected a 2-d score matrix, got {scores.shape}")
    return scores


# ===================================================================
# RETRIEVAL
# ===================================================================

@dataclass(frozen=True)
class RelevanceMap:
    """relevant[q] is the set of gallery indices relevant to query q."""
    relevant: Tuple[FrozenSet[int], ...]

    @classmethod
    def from_lists(cls, lists):
        return cls(tuple(frozenset(int(i) for i in items) for items in lists))

    @classmethod
    def identity(cls, n):
        return cls(tuple(frozenset([i]) for i in range(n)))

    def __len__(self):
        return len(self.relevant)

    def check(self, n_queries, n_gallery):
        if len(self.relevant) != n_queries:
            raise ConfigError(f"relevance map has {len(self.relevant)} queries, score matrix has {n_queries}")
        for q, items in enumerate(self.relevant):
            if not items:
                raise ConfigError(f"query {q} has no relevant gallery item")
            if min(items) < 0 or max(items) >= n_gallery:
                raise ConfigError(f"query {q} references a gallery index outside [0, {n_gallery})")


def rank_order(scores):
    """Gallery indices per query, best first, ties by ascending index."""
    return np.argsort(-_matrix(scores), axis=1, kind='stable')


def _hit_matrix(scores, rel: RelevanceMap, depth):
    scores = _matrix(scores)
    rel.check(*scores.shape)
    order = rank_order(scores)[:, :depth]
    return np.array([[g in rel.relevant[q] for g in row] for q, row in enumerate(order)], dtype=bool)


def recall_at_k(S, rel: RelevanceMap, k: int) -> float:
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    hits = _hit_matrix(S, rel, k)
    return float(hits.any(axis=1).mean())


def map_at_10(S, rel: RelevanceMap, depth=MAP_DEPTH) -> float:
    hits = _hit_matrix(S, rel, depth).astype(np.float64)
    ranks = np.arange(1, hits.shape[1] + 1, dtype=np.float64)
    precision = np.cumsum(hits, axis=1) / ranks
    norm = np.array([min(len(items), depth) for items in rel.relevant], dtype=np.float64)
    ap = [math.fsum(row) / n for row, n in zip(precision * hits, norm)]
    return math.fsum(ap) / len(ap)


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    r1: float
    r5: float
    r10: float
    map10: float
    n_queries: int

    def __post_init__(self):
        if not self.r1 <= self.r5 <= self.r10:
            raise InvalidInputError("recall must be non-decreasing in k")

    def to_dict(self):
        return {'direction': self.direction, 'r1': self.r1, 'r5': self.r5, 'r10': self.r10,
                'map10': self.map10, 'n_queries': self.n_queries}


def retrieval_report(S, rel: RelevanceMap, direction) -> RetrievalReport:
    r1, r5, r10 = (recall_at_k(S, rel, k) for k in RECALL_THRESHOLDS)
    return RetrievalReport(direction, r1, r5, r10, map_at_10(S, rel), len(rel))


def retrieval_relevance(audio_sources: Sequence[str], text_sources: Sequence[str]):
    """(audio->text, text->audio) relevance maps from shared source ids."""
    a2t = RelevanceMap.from_lists([[j for j, t in enumerate(text_sources) if t == a] for a in audio_sources])
    t2a = RelevanceMap.from_lists([[i for i, a in enumerate(audio_sources) if a == t] for t in text_sources])
    return a2t, t2a


def retrieval_from_embeddings(audio: EmbeddingBatch, text: EmbeddingBatch,
                              audio_sources, text_sources) -> Tuple[RetrievalReport, RetrievalReport]:
    scores = cosine_similarity_matrix(audio, text)
    a2t, t2a = retrieval_relevance(audio_sources, text_sources)
    return (retrieval_report(scores.transpose(), t2a, TEXT_TO_AUDIO),
            retrieval_report(scores, a2t, AUDIO_TO_TEXT))


def evaluate_retrieval(params, records, store) -> Tuple[RetrievalReport, RetrievalReport]:
    """Both directions over a manifest; the audio gallery holds one clip per source id."""
    if not records:
        raise ConfigError("evaluation manifest is empty")
    audio, text = forward_pair_batch(records, params, store)
    first_of_source = {}
    for idx, r in enumerate(records):
        first_of_source.setdefault(r.source_id, idx)
    audio_idx = list(first_of_source.values())
    return retrieval_from_embeddings(audio.take(audio_idx), text,
                                     [records[i].source_id for i in audio_idx],
                                     [r.source_id for r in records])


def per_domain_retrieval(params, records, store) -> Dict[str, Tuple[RetrievalReport, RetrievalReport]]:
    out = {}
    for domain in Domain:
        subset = [r for r in records if r.domain is domain]
        if subset:
            out[domain.value] = evaluate_retrieval(params, subset, store)
    return out


# ===================================================================
# BRUTE-FORCE ORACLES
# ===================================================================

def _full_sort(row):
    return [g for _, g in sorted(((-float(s), g) for g, s in enumerate(row)))]


def brute_force_recall_at_k(S, relevant_lists, k):
    scores = _matrix(S)
    wins = 0
    for q in range(scores.shape[0]):
        ranking = _full_sort(scores[q])
        if any(g in relevant_lists[q] for g in ranking[:k]):
            wins += 1
    return wins / scores.shape[0]


def brute_force_map_at_10(S, relevant_lists, depth=MAP_DEPTH):
    scores = _matrix(S)
    aps = []
    for q in range(scores.shape[0]):
        ranking = _full_sort(scores[q])
        found = 0
        terms = []
        for r, g in enumerate(ranking[:depth], 1):
            if g in relevant_lists[q]:
                found += 1
                terms.append(found / r)
        aps.append(math.fsum(terms) / min(len(relevant_lists[q]), depth))
    return math.fsum(aps) / len(aps)


def brute_force_multilabel_map(scores, truth):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    aps = []
    for c in range(scores.shape[1]):
        n_pos = int(truth[:, c].sum())
        if n_pos == 0:
            continue
        ranking = _full_sort(scores[:, c])
        found = 0
        terms = []
        for r, i in enumerate(ranking, 1):
            if truth[i, c]:
                found += 1
                terms.append(found / r)
        aps.append(math.fsum(terms) / n_pos)
    return math.fsum(aps) / len(aps)


# ===================================================================
# ZERO-SHOT
# ===================================================================

LABEL_SLOT = '{label}'


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str

    def __post_init__(self):
        if self.pattern.count(LABEL_SLOT) != 1:
            raise InvalidInputError(f"prompt template needs exactly one {LABEL_SLOT} slot: {self.pattern!r}")

    def render(self, label: str) -> str:
        return self.pattern.replace(LABEL_SLOT, label)


DOMAIN_TEMPLATES = {Domain(d): PromptTemplate(p) for d, p in PROMPT_TEMPLATES.items()}


def render_prompt(template: PromptTemplate, label: str) -> str:
    return template.render(label)


def template_for_domain(domain) -> PromptTemplate:
    try:
        return DOMAIN_TEMPLATES[Domain(domain)]
    except ValueError:
        raise ConfigError(f"Unknown domain: {domain}") from None


@dataclass(frozen=True)
class ZeroShotTask:
    labels: Tuple[str, ...]
    domain: Domain
    template: Optional[PromptTemplate] = None
    multi_label: bool = False
    name: str = 'zeroshot'

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise InvalidInputError("zero-shot task needs at least one label")
        if len(set(labels)) != len(labels):
            raise InvalidInputError("zero-shot labels must be unique")
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'domain', Domain(self.domain))
        if self.template is None:
            object.__setattr__(self, 'template', template_for_domain(self.domain))

    def prompts(self) -> List[str]:
        return [self.template.render(label) for label in self.labels]


@dataclass(frozen=True)
class ZeroShotResult:
    scores: np.ndarray
    predictions: Optional[np.ndarray]


def compile_task(task: ZeroShotTask, text_tower) -> EmbeddingBatch:
    """Label-embedding matrix: one row per rendered prompt."""
    return text_tower.embed_texts(task.prompts())


def zero_shot_classify(audio: EmbeddingBatch, task: ZeroShotTask, text_tower) -> ZeroShotResult:
    labels = compile_task(task, text_tower)
    scores = cosine_similarity_matrix(audio, labels).scores
    if task.multi_label:
        return ZeroShotResult(scores, None)
    # argmax returns the first maximum: ties go to the lowest label index
    return ZeroShotResult(scores, np.argmax(scores, axis=1))


def zero_shot_accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape or predictions.size == 0:
        raise ShapeError(f"predictions {predictions.shape} vs truth {truth.shape}")
    return float((predictions == truth).mean())


def zero_shot_by_language(predictions, truth, languages) -> pd.DataFrame:
    """Accuracy per language tag, e.g. for translated label sets or keyword spotting."""
    df = pd.DataFrame({'language': list(languages),
                       'correct': np.asarray(predictions) == np.asarray(truth)})
    table = df.groupby('language', sort=True)['correct'].agg(['count', 'mean']).reset_index()
    return table.rename(columns={'count': 'n_items', 'mean': 'accuracy'})


def multilabel_map(scores, truth):
    """
    Macro mAP over classes, each class ranking all clips by score.
    Classes without positives are excluded; returns (mAP, n_excluded).
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs truth {truth.shape}")
    positives = truth.sum(axis=0)
    excluded = int((positives == 0).sum())
    if excluded:
        logging.warning(f"multilabel mAP: {excluded} class(es) without positives excluded")
    keep = positives > 0
    if not keep.any():
        raise InvalidInputError("no class has a positive example")

    order = np.argsort(-scores[:, keep], axis=0, kind='stable')
    hits = np.take_along_axis(truth[:, keep], order, axis=0).astype(np.float64)
    ranks = np.arange(1, scores.shape[0] + 1, dtype=np.float64)[:, None]
    precision = np.cumsum(hits, axis=0) / ranks
    ap = [math.fsum(col) / n for col, n in zip((precision * hits).T, positives[keep])]
    return math.fsum(ap) / len(ap), excluded


def zero_shot_report(task: ZeroShotTask, result: ZeroShotResult, truth) -> dict:
    report = {'task': task.name, 'n_items': int(result.scores.shape[0]), 'n_labels': len(task.labels)}
    if task.multi_label:
        report['map'], _ = multilabel_map(result.scores, truth)
    else:
        report['accuracy'] = zero_shot_accuracy(result.predictions, truth)
    return report
