"""Synthetic corpora with planted words and images for desk-scale checks.

Each few-shot class owns a unit template (its spoken form), a word-feature
direction and a pixel-signal direction. Corpus utterances embed a possibly
corrupted template copy between filler units; images carry the class signal at
a few random pixels over noise. Gold labels are written alongside so retrieval
and mining quality can be scored exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pairs import SupportItem, SupportSet, write_support
from .unitseq import UnitSequence, segment_units, write_unit_sequences
from .vision import write_embeddings, write_grids


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 5
    shots: int = 5
    vocab_size: int = 60
    disjoint_units: bool = False
    word_len: tuple[int, int] = (5, 8)
    filler_len: tuple[int, int] = (3, 10)
    segment_frames: tuple[int, int] = (1, 4)
    noise: float = 0.0
    utterances_per_class: int = 100
    background_utterances: int = 100
    frame_dim: int = 16
    frame_noise: float | None = None
    speaker_shift: float = 0.0
    d_aud: int = 32
    word_signal: float = 1.0
    word_noise: float = 0.15
    n_background_classes: int = 5
    d_img: int = 16
    separation: float = 4.0
    grid_hw: tuple[int, int] = (3, 3)
    d_pix: int = 32
    pixel_signal: float = 1.0
    pixel_noise: float = 0.15
    object_pixels: tuple[int, int] = (1, 2)
    pool_images_per_class: int = 100
    pool_background_images: int = 100
    background_images: int = 100
    test_words_per_class: int = 40
    test_images_per_class: int = 40
    imposter_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise rate must lie in [0, 1)")
        if self.separation <= 0:
            raise ConfigError("image cluster separation must be > 0")
        if self.vocab_size < self.n_classes:
            raise ConfigError("vocabulary smaller than the class count")
        if self.disjoint_units and self.vocab_size < 3 * (self.n_classes + 1):
            raise ConfigError("disjoint inventories need vocab_size >= 3 * (n_classes + 1)")
        if self.n_classes < 2 or self.shots < 1:
            raise ConfigError("need >= 2 classes and >= 1 shot")
        if not 0.0 <= self.imposter_fraction < 1.0:
            raise ConfigError("imposter_fraction must lie in [0, 1)")
        for name in ("word_len", "filler_len", "segment_frames", "object_pixels"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"bad range for {name}: {(lo, hi)}")
        h, w = self.grid_hw
        if h < 1 or w < 1 or self.object_pixels[1] > h * w:
            raise ConfigError("grid too small for the object pixel count")

    @property
    def labels(self) -> list[str]:
        return [f"class{c:02d}" for c in range(self.n_classes)]

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, rec: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(rec) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()})


def frame_error_rate(protos, sigma, rng, draws=20000):
    """Per-frame nearest-prototype (cosine) confusion rate at noise ``sigma``."""
    u = rng.integers(0, len(protos), size=draws)
    x = protos[u] + rng.normal(0.0, sigma, size=(draws, protos.shape[1]))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return float(np.mean(np.argmax(x @ protos.T, axis=1) != u))


def matched_frame_noise(protos, rate, seed=0, iters=30):
    """Additive frame noise whose per-frame confusion rate equals ``rate``.

    Bisection on a Monte-Carlo estimate with a fixed stream, so the result is
    deterministic for given prototypes.
    """
    if rate <= 0:
        return 0.0
    lo, hi = 0.0, 4.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if frame_error_rate(protos, mid, np.random.default_rng(seed)) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _unit_directions(rng, count, dim):
    """Unit vectors, orthonormal when ``count <= dim``."""
    raw = rng.normal(size=(dim, max(count, 1)))
    if count <= dim:
        q, _ = np.linalg.qr(raw)
        return q[:, :count].T
    return (raw / np.linalg.norm(raw, axis=0)).T[:count]


class _UnitDraw:
    """Random unit ids from an inventory, never repeating the previous unit."""

    def __init__(self, rng, inventory):
        self.rng = rng
        self.inv = np.asarray(inventory)

    def seq(self, length, prev=None):
        out = []
        for _ in range(length):
            out.append(self.one(prev, None))
            prev = out[-1]
        return out

    def one(self, prev, nxt, avoid=None):
        while True:
            u = int(self.inv[self.rng.integers(len(self.inv))])
            if u != prev and u != nxt and u != avoid:
                return u


@dataclass
class _Utterance:
    uid: str
    segments: list      # unit id per segment
    labels: list
    region: tuple       # planted word segment span
    corrupted: int = 0


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write a complete synthetic dataset under ``out_dir``; returns file map."""
    out = Path(out_dir)
    for sub in ("units", "audio", "vision"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    labels = spec.labels
    V = spec.vocab_size

    # unit inventories
    if spec.disjoint_units:
        block = V // (spec.n_classes + 1)
        inv = {c: list(range(k * block, (k + 1) * block)) for k, c in enumerate(labels)}
        filler_inv = list(range(spec.n_classes * block, V))
    else:
        inv = {c: list(range(V)) for c in labels}
        filler_inv = list(range(V))
    templates = {}
    for c in labels:
        n = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
        templates[c] = _UnitDraw(rng, inv[c]).seq(n)
    filler = _UnitDraw(rng, filler_inv)
    anyunit = _UnitDraw(rng, range(V))

    def corrupt(word, prev, nxt):
        """Substitute each segment with probability ``noise``."""
        word = list(word)
        hits = 0
        for k in range(len(word)):
            if rng.random() < spec.noise:
                left = word[k - 1] if k > 0 else prev
                right = word[k + 1] if k + 1 < len(word) else nxt
                word[k] = anyunit.one(left, right, avoid=word[k])
                hits += 1
        return word, hits

    def planted(uid, label, isolated=False):
        pre, post = [], []
        if not isolated:
            pre = filler.seq(int(rng.integers(spec.filler_len[0], spec.filler_len[1] + 1)))
        word, hits = corrupt(templates[label], pre[-1] if pre else None, None)
        if pre and word[0] == pre[-1]:
            pre[-1] = filler.one(pre[-2] if len(pre) > 1 else None, word[0])
        if not isolated:
            post = filler.seq(int(rng.integers(spec.filler_len[0], spec.filler_len[1] + 1)), prev=word[-1])
        segs = pre + word + post
        return _Utterance(uid, segs, [label], (len(pre), len(pre) + len(word)), hits)

    corpus = []
    for c in labels:
        for k in range(spec.utterances_per_class):
            corpus.append(planted(f"utt_{c}_{k:04d}", c))
    for k in range(spec.background_utterances):
        n = int(rng.integers(spec.filler_len[0], spec.filler_len[1] + 1)) * 2 + spec.word_len[0]
        corpus.append(_Utterance(f"utt_bg_{k:04d}", filler.seq(n), [], (0, 0)))
    support_utts = [planted(f"sup_{c}_{k}", c, isolated=True) for c in labels for k in range(spec.shots)]
    # shuffle so corpus order carries no label information
    corpus = [corpus[i] for i in rng.permutation(len(corpus))]
    for k, u in enumerate(corpus):
        u.uid = f"utt_{k:05d}"

    def to_units(u):
        frames = []
        for s in u.segments:
            frames.extend([s] * int(rng.integers(spec.segment_frames[0], spec.segment_frames[1] + 1)))
        seq = UnitSequence(u.uid, tuple(frames), 20.0)
        assert len(segment_units(seq)) == len(u.segments), "adjacent duplicate segments"
        return seq

    corpus_units = [to_units(u) for u in corpus]
    support_units = [to_units(u) for u in support_utts]
    write_unit_sequences(out / "units" / "corpus.jsonl", corpus_units)
    write_unit_sequences(out / "units" / "support.jsonl", support_units)

    # frame features: unit prototype + per-utterance speaker shift + noise
    protos = _unit_directions(rng, V, spec.frame_dim)
    sigma = spec.frame_noise if spec.frame_noise is not None else matched_frame_noise(protos, spec.noise, spec.seed)
    frame_ids, frame_rows = [], []
    for seq in corpus_units + support_units:
        shift = rng.normal(0.0, spec.speaker_shift, size=spec.frame_dim)
        f = protos[list(seq.units)] + shift + rng.normal(0.0, sigma, size=(len(seq), spec.frame_dim))
        frame_ids.extend([seq.utterance_id] * len(seq))
        frame_rows.append(f)
    write_embeddings(out / "audio" / "frames.emb", frame_ids, np.concatenate(frame_rows))

    # word-level acoustic features
    all_dirs = _unit_directions(rng, spec.n_classes + spec.n_background_classes, spec.d_aud)
    word_dir = dict(zip(labels, all_dirs[: spec.n_classes]))

    def word_vec(label):
        v = rng.normal(0.0, spec.word_noise, size=spec.d_aud)
        if label is not None:
            v = v + spec.word_signal * word_dir[label]
        return v

    word_ids, word_rows, regions = [], [], {}
    for u in corpus + support_utts:
        regions[u.uid] = list(u.region)
        if u.labels:
            word_ids.append(f"{u.uid}#word")
            word_rows.append(word_vec(u.labels[0]))
        word_ids.append(f"{u.uid}#filler")
        word_rows.append(word_vec(None))
    test_words = {}
    for c in labels:
        test_words[c] = [f"test_word_{c}_{k:03d}" for k in range(spec.test_words_per_class)]
        for w in test_words[c]:
            word_ids.append(w)
            word_rows.append(word_vec(c))
    write_embeddings(out / "audio" / "words.emb", word_ids, np.stack(word_rows))
    _dump(out / "audio" / "word_regions.json", regions)

    # images
    bg_labels = [f"bg{c:02d}" for c in range(spec.n_background_classes)]
    pix_dirs = _unit_directions(rng, len(labels) + len(bg_labels), spec.d_pix)
    pix_dir = dict(zip(labels + bg_labels, pix_dirs))
    img_dirs = _unit_directions(rng, len(labels) + len(bg_labels), spec.d_img)
    img_dir = dict(zip(labels + bg_labels, img_dirs))
    H, W = spec.grid_hw

    def image(label):
        emb = spec.separation * img_dir[label] + rng.normal(size=spec.d_img)
        grid = rng.normal(0.0, spec.pixel_noise, size=(H * W, spec.d_pix))
        k = int(rng.integers(spec.object_pixels[0], spec.object_pixels[1] + 1))
        where = rng.choice(H * W, size=k, replace=False)
        grid[where] += spec.pixel_signal * pix_dir[label]
        return emb, grid.reshape(H, W, spec.d_pix)

    img_ids, img_rows, grid_ids, grid_rows, img_gold = [], [], [], [], {}

    def add(iid, label, with_embedding=True):
        emb, grid = image(label)
        if with_embedding:
            img_ids.append(iid)
            img_rows.append(emb)
        grid_ids.append(iid)
        grid_rows.append(grid)
        img_gold[iid] = [label] if label in labels else []

    support_items = []
    for c in labels:
        for k in range(spec.shots):
            iid = f"sup_img_{c}_{k}"
            add(iid, c)
            n_seg = len(next(u for u in support_utts if u.uid == f"sup_{c}_{k}").segments)
            support_items.append(SupportItem(c, f"sup_{c}_{k}", (0, n_seg), iid))
    pool_labels = [c for c in labels for _ in range(spec.pool_images_per_class)]
    pool_labels += [bg_labels[k % len(bg_labels)] for k in range(spec.pool_background_images)]
    pool_ids = []
    for k, i in enumerate(rng.permutation(len(pool_labels))):
        pool_ids.append(f"pool_{k:05d}")
        add(pool_ids[-1], pool_labels[i])
    background_ids = []
    for k in range(spec.background_images):
        background_ids.append(f"background_{k:04d}")
        add(background_ids[-1], bg_labels[k % len(bg_labels)], with_embedding=False)
    n_true = spec.test_images_per_class * len(labels)
    n_imp = int(round(n_true * spec.imposter_fraction / (1.0 - spec.imposter_fraction)))
    test_labels = [c for c in labels for _ in range(spec.test_images_per_class)]
    test_labels += [bg_labels[k % len(bg_labels)] for k in range(n_imp)]
    test_images = {c: [] for c in labels}
    imposters = []
    for k, i in enumerate(rng.permutation(len(test_labels))):
        iid = f"test_{k:05d}"
        add(iid, test_labels[i], with_embedding=False)
        (test_images[test_labels[i]] if test_labels[i] in test_images else imposters).append(iid)

    write_embeddings(out / "vision" / "images.emb", img_ids, np.stack(img_rows))
    write_grids(out / "vision" / "grids.grd", grid_ids, grid_rows)

    support = SupportSet(len(labels), spec.shots, tuple(support_items))
    write_support(out / "support.json", support)
    _dump(out / "vision" / "background.json", {"image_ids": background_ids})

    gold = {
        "utterances": {u.uid: u.labels for u in sorted(corpus, key=lambda u: u.uid)},
        "planted_segments": int(sum(len(templates[u.labels[0]]) for u in corpus if u.labels)),
        "corrupted_segments": int(sum(u.corrupted for u in corpus)),
        "templates": templates,
        "images": dict(sorted(img_gold.items())),
        "pool_image_ids": pool_ids,
        "background_image_ids": background_ids,
    }
    _dump(out / "gold.json", gold)
    _dump(out / "test_set.json", {
        "words": test_words,
        "images": test_images,
        "word_store": "audio/words.emb",
        "grid_store": "vision/grids.grd",
    })
    pool_images = [{"image_id": i, "labels": img_gold[i]} for c in labels for i in test_images[c]]
    pool_images += [{"image_id": i, "labels": []} for i in imposters]
    pool_images.sort(key=lambda r: r["image_id"])
    _dump(out / "pool.json", {
        "images": pool_images,
        "queries": test_words,
        "word_store": "audio/words.emb",
        "grid_store": "vision/grids.grd",
    })
    _dump(out / "synthetic_spec.json", spec.to_json())
    return {
        "corpus_units": out / "units" / "corpus.jsonl",
        "support_units": out / "units" / "support.jsonl",
        "frames": out / "audio" / "frames.emb",
        "words": out / "audio" / "words.emb",
        "word_regions": out / "audio" / "word_regions.json",
        "images": out / "vision" / "images.emb",
        "grids": out / "vision" / "grids.grd",
        "support": out / "support.json",
        "background": out / "vision" / "background.json",
        "gold": out / "gold.json",
        "test_set": out / "test_set.json",
        "pool": out / "pool.json",
    }


def isolate_word_features(words_store: dict, regions: dict, items) -> dict:
    """Stand-in acoustic encoder applied to isolated word spans.

    ``items`` yields ``(word_id, utterance_id, span)``. A span covering at least
    half of the utterance's planted word (and no more than twice its length)
    gets that word's feature; anything else gets the utterance's filler feature.
    """
    out = {}
    for word_id, uid, span in items:
        a, b = span
        ra, rb = regions[uid]
        overlap = max(0, min(b, rb) - max(a, ra))
        size = rb - ra
        hit = size > 0 and overlap * 2 >= size and (b - a) <= 2 * size
        key = f"{uid}#word" if hit else f"{uid}#filler"
        out[word_id] = words_store[key]
    return out


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
