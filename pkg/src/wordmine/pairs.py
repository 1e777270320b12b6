"""Support sets, mined word-image pairs and contrastive training bundles."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ClassMismatch, ConfigError, FormatError, InsufficientPool
from .search import MinedWord
from .vision import ImageRanking

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupportItem:
    class_label: str
    word_utterance: str
    word_span: tuple[int, int]
    image_id: str


@dataclass(frozen=True)
class SupportSet:
    ways: int
    shots: int
    items: tuple[SupportItem, ...]

    def __post_init__(self):
        if self.ways < 1 or self.shots < 1:
            raise ConfigError(f"ways and shots must be >= 1 (got L={self.ways}, K={self.shots})")
        per_class = defaultdict(int)
        for it in self.items:
            per_class[it.class_label] += 1
        if len(per_class) != self.ways:
            raise ConfigError(f"support set has {len(per_class)} classes, expected {self.ways}")
        bad = {c: k for c, k in per_class.items() if k != self.shots}
        if bad:
            raise ConfigError(f"classes without exactly {self.shots} shots: {bad}")

    @property
    def labels(self) -> list[str]:
        return sorted({it.class_label for it in self.items})

    def by_class(self) -> dict[str, list[SupportItem]]:
        out = defaultdict(list)
        for it in self.items:
            out[it.class_label].append(it)
        return {c: out[c] for c in sorted(out)}

    def to_json(self) -> dict:
        return {
            "ways": self.ways,
            "shots": self.shots,
            "items": [
                {"class": it.class_label, "word_utterance": it.word_utterance,
                 "word_span": list(it.word_span), "image_id": it.image_id}
                for it in self.items
            ],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "SupportSet":
        try:
            items = tuple(
                SupportItem(r["class"], r["word_utterance"], tuple(r["word_span"]), r["image_id"])
                for r in rec["items"]
            )
            return cls(int(rec["ways"]), int(rec["shots"]), items)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed support manifest: {exc}") from exc


def read_support(path) -> SupportSet:
    with open(path, encoding="utf-8") as fh:
        return SupportSet.from_json(json.load(fh))


def write_support(path, support: SupportSet) -> None:
    _dump(path, support.to_json())


@dataclass(frozen=True)
class MinedPair:
    class_label: str
    rank: int
    utterance_id: str
    word_span: tuple[int, int]
    image_id: str
    split: str  # "train" | "validation"

    @property
    def word_id(self) -> str:
        return f"{self.utterance_id}:{self.word_span[0]}-{self.word_span[1]}"


@dataclass(frozen=True)
class MinedPairSet:
    pairs: tuple[MinedPair, ...]
    background_image_ids: tuple[str, ...] = ()

    def __post_init__(self):
        mined_images = {p.image_id for p in self.pairs}
        clash = mined_images.intersection(self.background_image_ids)
        if clash:
            raise ValueError(f"background ids overlap mined images: {sorted(clash)[:5]}")

    @property
    def train(self) -> list[MinedPair]:
        return [p for p in self.pairs if p.split == "train"]

    @property
    def validation(self) -> list[MinedPair]:
        return [p for p in self.pairs if p.split == "validation"]

    @property
    def labels(self) -> list[str]:
        return sorted({p.class_label for p in self.pairs})

    def to_json(self) -> dict:
        return {
            "pairs": [
                {"class": p.class_label, "rank": p.rank, "utterance_id": p.utterance_id,
                 "word_span": list(p.word_span), "image_id": p.image_id, "split": p.split}
                for p in self.pairs
            ],
            "background_image_ids": list(self.background_image_ids),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "MinedPairSet":
        pairs = tuple(
            MinedPair(r["class"], int(r["rank"]), r["utterance_id"], tuple(r["word_span"]), r["image_id"], r["split"])
            for r in rec["pairs"]
        )
        return cls(pairs, tuple(rec.get("background_image_ids", ())))


def read_pairs(path) -> MinedPairSet:
    with open(path, encoding="utf-8") as fh:
        return MinedPairSet.from_json(json.load(fh))


def write_pairs(path, pairs: MinedPairSet) -> None:
    _dump(path, pairs.to_json())


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def build_mined_pairs(
    words: Iterable[MinedWord],
    images: Sequence[ImageRanking],
    n: int,
    val_fraction: float = 0.1,
    background_image_ids: Sequence[str] = (),
    seed: int = 0,
) -> MinedPairSet:
    """Pair the rank-i mined word of each class with its rank-i mined image.

    Each class keeps ``min(#words, #images, n)`` pairs; ``round(val_fraction *
    count)`` of them, picked by a seeded shuffle, become validation pairs.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    by_class = defaultdict(list)
    for w in words:
        by_class[w.class_label].append(w)
    img_by_class = {r.class_label: r for r in images}
    if set(by_class) != set(img_by_class):
        only_w = sorted(set(by_class) - set(img_by_class))
        only_i = sorted(set(img_by_class) - set(by_class))
        raise ClassMismatch(f"classes only in words: {only_w}; only in images: {only_i}")

    rng = np.random.default_rng(seed)
    out = []
    for label in sorted(by_class):
        ws = sorted(by_class[label], key=lambda w: (-w.score, w.utterance_id))
        ims = img_by_class[label].image_ids
        count = min(len(ws), len(ims), n)
        n_val = int(np.floor(val_fraction * count + 0.5))
        val_idx = set(rng.permutation(count)[:n_val].tolist())
        for k in range(count):
            split = "validation" if k in val_idx else "train"
            out.append(MinedPair(label, k, ws[k].utterance_id, tuple(ws[k].span), ims[k], split))
    return MinedPairSet(tuple(out), tuple(background_image_ids))


def support_pairs(
    support: SupportSet,
    val_fraction: float = 0.1,
    background_image_ids: Sequence[str] = (),
    seed: int = 0,
) -> MinedPairSet:
    """Treat the ground-truth support set itself as the pair set (no mining)."""
    words = []
    images = []
    for label, items in support.by_class().items():
        words.extend(MinedWord(it.word_utterance, label, tuple(it.word_span), 1.0) for it in items)
        images.append(ImageRanking(label, tuple((it.image_id, 1.0) for it in items)))
    return build_mined_pairs(words, images, len(support.items), val_fraction, background_image_ids, seed)


@dataclass(frozen=True)
class TrainingBundle:
    anchor: MinedPair
    positives: tuple[MinedPair, ...]
    negatives: tuple[MinedPair, ...]
    background_image_ids: tuple[str, ...] = field(default=())


def _draw(rng, pool_size, k, side):
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if pool_size == 0:
        raise InsufficientPool(f"no candidates for {k} {side}", side=side)
    if pool_size < k:
        log.info("%s pool has %d items for %d draws; sampling with replacement", side, pool_size, k)
        return rng.integers(0, pool_size, size=k)
    return rng.choice(pool_size, size=k, replace=False)


def sample_bundle(
    pairs: MinedPairSet,
    anchor_index: int,
    n_pos: int = 5,
    n_neg: int = 11,
    rng_seed=0,
) -> TrainingBundle:
    """Draw positives, other-class negatives and background negatives.

    ``anchor_index`` indexes ``pairs.train``. Positives come from the anchor's
    class (anchor excluded), negatives from the positive pairs of all other
    classes, and background negatives from ``pairs.background_image_ids``.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError("n_pos and n_neg must be >= 0")
    train = pairs.train
    anchor = train[anchor_index]
    same = [p for k, p in enumerate(train) if p.class_label == anchor.class_label and k != anchor_index]
    other = [p for p in train if p.class_label != anchor.class_label]
    rng = np.random.default_rng(rng_seed)
    pos = _draw(rng, len(same), n_pos, "positives")
    neg = _draw(rng, len(other), n_neg, "negatives")
    bg = pairs.background_image_ids
    if len(bg) < n_neg:
        raise InsufficientPool(f"background pool has {len(bg)} images, need {n_neg}", side="background")
    bg_idx = rng.choice(len(bg), size=n_neg, replace=False) if n_neg else []
    return TrainingBundle(
        anchor,
        tuple(same[i] for i in pos),
        tuple(other[i] for i in neg),
        tuple(bg[i] for i in bg_idx),
    )


def validation_triplets(pairs: MinedPairSet, seed: int = 0) -> list[tuple[str, str, str]]:
    """Build ``(word_id, positive_image, negative_image)`` dev triplets.

    Every validation pair yields one triplet with its own image as the
    positive and, when its class has another pair, a second triplet with that
    other image as the positive. Negatives come from other classes.
    """
    rng = np.random.default_rng(seed)
    val = pairs.validation
    everything = list(pairs.pairs)
    out = []
    for p in val:
        others = [q for q in everything if q.class_label != p.class_label]
        if not others:
            raise InsufficientPool("validation needs at least two classes", side="negatives")
        same = [q for q in val if q.class_label == p.class_label and q is not p]
        if not same:
            same = [q for q in everything if q.class_label == p.class_label and q is not p]
        neg = others[int(rng.integers(len(others)))].image_id
        out.append((p.word_id, p.image_id, neg))
        if same:
            out.append((p.word_id, same[int(rng.integers(len(same)))].image_id, neg))
    return out
