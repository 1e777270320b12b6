"""Query-by-example search of an unlabelled corpus with support-set words."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .errors import EmptyInput, MalformedQueryBank, MissingGold
from .unitseq import (
    FrameFeatureSequence,
    ScoringParams,
    SegmentedUtterance,
    nw_align,
    subsequence_dtw,
)


def default_workers() -> int:
    return max(1, int(os.environ.get("WORDMINE_WORKERS", "1")))


class QueryBank:
    """K spoken-word queries for each of L classes."""

    def __init__(self, queries: Mapping[str, Sequence]):
        if not queries:
            raise MalformedQueryBank("query bank has no classes")
        sizes = {label: len(q) for label, q in queries.items()}
        empty = [label for label, k in sizes.items() if k == 0]
        if empty:
            raise MalformedQueryBank(f"classes with zero queries: {empty}")
        if len(set(sizes.values())) != 1:
            raise MalformedQueryBank(f"classes have different shot counts: {sizes}")
        self.queries = {label: list(queries[label]) for label in sorted(queries)}

    @property
    def labels(self) -> list[str]:
        return list(self.queries)

    @property
    def ways(self) -> int:
        return len(self.queries)

    @property
    def shots(self) -> int:
        return len(next(iter(self.queries.values())))


@dataclass(frozen=True)
class RankEntry:
    utterance_id: str
    best_score: float
    best_query_index: int
    matched_span: tuple[int, int]


@dataclass(frozen=True)
class ClassRanking:
    class_label: str
    entries: tuple[RankEntry, ...]


@dataclass(frozen=True)
class MinedWord:
    utterance_id: str
    class_label: str
    span: tuple[int, int]
    score: float

    @property
    def word_id(self) -> str:
        return f"{self.utterance_id}:{self.span[0]}-{self.span[1]}"


def _rank(labels, corpus_ids, scorer, workers):
    """Score every (utterance, class) with ``scorer`` and sort canonically.

    ``scorer(label, index)`` returns ``(score, query_index, span)`` for the best
    query of ``label`` against corpus item ``index``.
    """
    def score_utt(idx):
        return [scorer(label, idx) for label in labels]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(score_utt, range(len(corpus_ids))))
    else:
        rows = [score_utt(i) for i in range(len(corpus_ids))]

    out = []
    for c, label in enumerate(labels):
        entries = [
            RankEntry(corpus_ids[i], float(rows[i][c][0]), int(rows[i][c][1]), tuple(rows[i][c][2]))
            for i in range(len(corpus_ids))
        ]
        entries.sort(key=lambda e: (-e.best_score, e.utterance_id))
        out.append(ClassRanking(label, tuple(entries)))
    return out


def _check_corpus(ids):
    if not ids:
        raise EmptyInput("corpus is empty")
    if len(set(ids)) != len(ids):
        raise ValueError("corpus contains duplicate utterance ids")


def search_corpus(
    queries: QueryBank,
    corpus: Sequence[SegmentedUtterance],
    scoring: ScoringParams = ScoringParams(),
    workers: int | None = None,
) -> list[ClassRanking]:
    """Rank corpus utterances per class by the best NW score over K queries.

    Ties within a class go to the lower query index; ties between utterances
    to the smaller ``utterance_id``.
    """
    ids = [u.utterance_id for u in corpus]
    _check_corpus(ids)

    def scorer(label, idx):
        best = None
        for k, q in enumerate(queries.queries[label]):
            res = nw_align(q, corpus[idx], scoring)
            if best is None or res.score > best[0]:
                best = (res.score, k, res.target_span)
        return best

    return _rank(queries.labels, ids, scorer, workers or default_workers())


def search_corpus_dtw(
    queries: Mapping[str, Sequence[FrameFeatureSequence]],
    corpus: Sequence[FrameFeatureSequence],
    workers: int | None = None,
) -> list[ClassRanking]:
    """Frame-level baseline: subsequence DTW, score = 1 - normalised distance.

    Spans in the result are frame spans, not segment spans.
    """
    bank = QueryBank(queries)
    ids = [u.utterance_id for u in corpus]
    _check_corpus(ids)

    def scorer(label, idx):
        best = None
        for k, q in enumerate(bank.queries[label]):
            dist, span = subsequence_dtw(q, corpus[idx])
            if best is None or 1.0 - dist > best[0]:
                best = (1.0 - dist, k, span)
        return best

    return _rank(bank.labels, ids, scorer, workers or default_workers())


def take_top_n(ranking: ClassRanking, n: int) -> list[MinedWord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [
        MinedWord(e.utterance_id, ranking.class_label, e.matched_span, e.best_score)
        for e in ranking.entries[:n]
    ]


@dataclass(frozen=True)
class RetrievalScores:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def evaluate_f1(
    mined: Iterable[MinedWord],
    gold_labels: Mapping[str, Iterable[str]],
    classes: Iterable[str] | None = None,
) -> tuple[dict[str, RetrievalScores], RetrievalScores]:
    """Utterance-level retrieval scores per class and micro-averaged.

    A mined word is correct when its class is among the gold labels of its
    utterance. Missed occurrences are counted over every gold utterance of the
    evaluated classes (``classes`` defaults to the classes seen in ``mined``).
    """
    mined = list(mined)
    gold = {u: set(ls) for u, ls in gold_labels.items()}
    for w in mined:
        if w.utterance_id not in gold:
            raise MissingGold(f"no gold labels for utterance {w.utterance_id!r}")
    labels = sorted(set(classes) if classes is not None else {w.class_label for w in mined})
    per_class = {}
    for label in labels:
        hits = {w.utterance_id for w in mined if w.class_label == label and label in gold[w.utterance_id]}
        n_mined = sum(1 for w in mined if w.class_label == label)
        n_true = sum(1 for ls in gold.values() if label in ls)
        per_class[label] = RetrievalScores(len(hits), n_mined - len(hits), n_true - len(hits))
    micro = RetrievalScores(
        sum(s.tp for s in per_class.values()),
        sum(s.fp for s in per_class.values()),
        sum(s.fn for s in per_class.values()),
    )
    return per_class, micro


def write_mined_words(path, words: Iterable[MinedWord]) -> None:
    recs = [dict(asdict(w), span=list(w.span)) for w in words]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(recs, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_mined_words(path) -> list[MinedWord]:
    with open(path, encoding="utf-8") as fh:
        recs = json.load(fh)
    return [MinedWord(r["utterance_id"], r["class_label"], tuple(r["span"]), float(r["score"])) for r in recs]

