"""Episodic few-shot classification and few-shot retrieval (P@N)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InsufficientPool
from .model import S_MAX, ModelParams, init_params, score_matrix


@dataclass(frozen=True)
class Episode:
    queries: tuple[tuple[str, str], ...]   # (class_label, word_id)
    matching: tuple[tuple[str, str], ...]  # (class_label, image_id)

    def __post_init__(self):
        qc = sorted(c for c, _ in self.queries)
        mc = sorted(c for c, _ in self.matching)
        if qc != mc or len(set(qc)) != len(qc):
            raise ValueError("episode needs exactly one query and one image per class")


def distance(S):
    """Cross-modal distance used for ranking: ``100 - S``."""
    return S_MAX - np.asarray(S)


def sample_episodes(
    test_words: Mapping[str, Sequence[str]],
    test_images: Mapping[str, Sequence[str]],
    ways: int,
    count: int = 1000,
    seed: int = 0,
    exclude: Iterable[str] = (),
) -> list[Episode]:
    """Seeded episodes with one random query word and image per class.

    When the test set has more than ``ways`` classes each episode draws its
    classes first. Ids in ``exclude`` (the support set) are never drawn.
    """
    if ways < 1 or count < 1:
        raise ValueError("ways and count must be >= 1")
    banned = set(exclude)
    words = {c: [w for w in ids if w not in banned] for c, ids in test_words.items()}
    images = {c: [i for i in ids if i not in banned] for c, ids in test_images.items()}
    labels = sorted(set(words) & set(images))
    if len(labels) < ways:
        raise InsufficientPool(f"{len(labels)} classes available for {ways}-way episodes", side="classes")
    for c in labels:
        if not words[c]:
            raise InsufficientPool(f"class {c!r} has no test words", side="words")
        if not images[c]:
            raise InsufficientPool(f"class {c!r} has no test images", side="images")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        chosen = labels if ways == len(labels) else sorted(rng.choice(labels, size=ways, replace=False).tolist())
        q = tuple((c, words[c][int(rng.integers(len(words[c])))]) for c in chosen)
        m = tuple((c, images[c][int(rng.integers(len(images[c])))]) for c in chosen)
        out.append(Episode(q, m))
    return out


def predict(scores: np.ndarray, labels: Sequence[str]) -> list[str]:
    """Row-wise argmax over matching images; ties go to the smallest label."""
    scores = np.asarray(scores)
    order = np.argsort(np.asarray(labels, dtype=object), kind="stable")
    out = []
    for row in scores:
        ranked = row[order]
        out.append(labels[order[int(np.argmax(ranked))]])
    return out


@dataclass(frozen=True)
class EpisodeResult:
    truth: tuple[str, ...]
    predicted: tuple[str, ...]

    @property
    def accuracy(self) -> float:
        return float(np.mean([t == p for t, p in zip(self.truth, self.predicted)]))


def classify_episode(
    params: ModelParams,
    episode: Episode,
    words: Mapping[str, np.ndarray],
    grids: Mapping[str, np.ndarray],
) -> EpisodeResult:
    qv = np.stack([words[w] for _, w in episode.queries])
    S = score_matrix(params, qv, [grids[i] for _, i in episode.matching])
    labels = [c for c, _ in episode.matching]
    return EpisodeResult(tuple(c for c, _ in episode.queries), tuple(predict(S, labels)))


def evaluate_episodes(
    params: ModelParams,
    episodes: Sequence[Episode],
    words: Mapping[str, np.ndarray],
    grids: Mapping[str, np.ndarray],
) -> list[EpisodeResult]:
    """Classify many episodes, scoring each distinct word-image pair once."""
    wids = sorted({w for e in episodes for _, w in e.queries})
    iids = sorted({i for e in episodes for _, i in e.matching})
    table = score_matrix(params, np.stack([words[w] for w in wids]), [grids[i] for i in iids])
    wpos = {w: k for k, w in enumerate(wids)}
    ipos = {i: k for k, i in enumerate(iids)}
    out = []
    for e in episodes:
        S = table[np.ix_([wpos[w] for _, w in e.queries], [ipos[i] for _, i in e.matching])]
        labels = [c for c, _ in e.matching]
        out.append(EpisodeResult(tuple(c for c, _ in e.queries), tuple(predict(S, labels))))
    return out


def untrained_baseline(
    episodes: Sequence[Episode],
    words: Mapping[str, np.ndarray],
    grids: Mapping[str, np.ndarray],
    d_emb: int = 32,
    seed: int = 0,
    scale: float = 1.0,
) -> list[EpisodeResult]:
    """Classify each episode with its own freshly drawn random parameters.

    A single random draw is one fixed (if arbitrary) classifier and can sit
    well away from 1/L; redrawing per episode averages over initialisations.
    """
    d_aud = next(iter(words.values())).shape[-1]
    d_pix = next(iter(grids.values())).shape[-1]
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=len(episodes))
    return [
        classify_episode(init_params(d_aud, d_pix, d_emb, int(s), scale), e, words, grids)
        for e, s in zip(episodes, seeds)
    ]


def summarize_episodes(results: Sequence[EpisodeResult]) -> dict:
    acc = np.array([r.accuracy for r in results])
    per_class: dict[str, list[bool]] = {}
    for r in results:
        for t, p in zip(r.truth, r.predicted):
            per_class.setdefault(t, []).append(t == p)
    n_queries = sum(len(r.truth) for r in results)
    overall = float(np.mean(acc))
    return {
        "episodes": len(results),
        "accuracy": overall,
        "episode_std": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
        "standard_error": float(np.sqrt(overall * (1 - overall) / n_queries)),
        "per_class": {c: float(np.mean(v)) for c, v in sorted(per_class.items())},
    }


def average_queries(words: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean of raw word feature vectors."""
    if len(words) == 0:
        raise EmptyInput("no query words to average")
    mats = [np.asarray(w, dtype=np.float64) for w in words]
    if len({m.shape for m in mats}) != 1:
        raise DimensionMismatch("query words differ in dimension")
    return np.mean(np.stack(mats), axis=0)


@dataclass(frozen=True)
class RetrievalPool:
    images: tuple[tuple[str, frozenset], ...]  # (image_id, gold labels)
    queries: Mapping[str, np.ndarray]           # class -> averaged word feature

    def true_count(self, label: str) -> int:
        return sum(1 for _, ls in self.images if label in ls)


def rank_images(image_ids: Sequence[str], scores: Sequence[float]) -> list[str]:
    """Descending score, ties by ascending image id."""
    return [i for _, i in sorted(zip((-float(s) for s in scores), image_ids))]


def precision_at_n(ranked: Sequence[str], relevant: set) -> float:
    """Share of relevant ids among the first ``N = len(relevant)`` ranked ids."""
    n = len(relevant)
    if n == 0:
        raise EmptyInput("P@N undefined without relevant items")
    return sum(1 for i in ranked[:n] if i in relevant) / n


def retrieve(
    params: ModelParams,
    pool: RetrievalPool,
    grids: Mapping[str, np.ndarray],
) -> dict:
    """Rank the whole pool for every class query and score P@N per class.

    Classes whose true count is zero are skipped and listed under
    ``"skipped"``; the headline ``"p_at_n"`` is the unweighted class mean.
    """
    ids = [i for i, _ in pool.images]
    labels = sorted(pool.queries)
    S = score_matrix(params, np.stack([pool.queries[c] for c in labels]), [grids[i] for i in ids])
    per_class, rankings, skipped = {}, {}, []
    for k, c in enumerate(labels):
        relevant = {i for i, ls in pool.images if c in ls}
        ranked = rank_images(ids, S[k])
        rankings[c] = ranked
        if not relevant:
            skipped.append(c)
            continue
        per_class[c] = {"n": len(relevant), "p_at_n": precision_at_n(ranked, relevant)}
    macro = float(np.mean([v["p_at_n"] for v in per_class.values()])) if per_class else 0.0
    return {"per_class": per_class, "p_at_n": macro, "skipped": skipped, "rankings": rankings}
