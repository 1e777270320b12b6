"""Stage functions and the end-to-end runner.

Every stage reads and writes files only, so any stage can be rerun alone and
reproduces its outputs byte for byte given the same inputs and seeds.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluation, model, pairs, search, unitseq, vision
from .errors import ConfigError, StageError
from .synthetic import SyntheticSpec, generate_synthetic, isolate_word_features

log = logging.getLogger(__name__)

DATA_FILES = {
    "corpus_units": "units/corpus.jsonl",
    "support_units": "units/support.jsonl",
    "support": "support.json",
    "words": "audio/words.emb",
    "word_regions": "audio/word_regions.json",
    "images": "vision/images.emb",
    "grids": "vision/grids.grd",
    "background": "vision/background.json",
    "test_set": "test_set.json",
    "pool": "pool.json",
}


@dataclass
class RunConfig:
    data_dir: str = ""
    run_root: str = "runs"
    ways: int = 5
    shots: int = 5
    n: int = 600
    n_pos: int = 5
    n_neg: int = 11
    match: float = 1.0
    mismatch: float = -1.0
    gap: float = -1.0
    lr: float = 1e-3
    epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    d_emb: int = 32
    init: str = "random"
    init_scale: float = 1.0
    mining: bool = True
    episodes: int = 1000
    queries_per_class: int = 20
    seed: int = 0
    workers: int = 1
    synthetic: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("ways", "shots", "n", "n_neg", "epochs", "patience", "d_emb", "episodes",
                     "queries_per_class", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.n_pos < 0:
            raise ConfigError("n_pos must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        try:
            self.scoring()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.synthetic:
            SyntheticSpec.from_json(self.synthetic)
        elif not self.data_dir:
            raise ConfigError("data_dir is required when no [synthetic] section is given")
        if self.init not in ("random", "orthogonal") and not Path(self.init).is_file():
            raise ConfigError(f"init must be 'random', 'orthogonal' or a checkpoint path: {self.init}")

    def scoring(self) -> unitseq.ScoringParams:
        return unitseq.ScoringParams(self.match, self.mismatch, self.gap)

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path) -> RunConfig:
    """Read an INI file with a ``[run]`` section and optional ``[synthetic]``.

    Unknown keys are rejected so a typo cannot silently fall back to a default.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    if "run" not in cp:
        raise ConfigError("config needs a [run] section")
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, raw in cp["run"].items():
        if key not in types or key == "synthetic":
            raise ConfigError(f"unknown [run] key: {key}")
        default = getattr(RunConfig(), key)
        try:
            if isinstance(default, bool):
                values[key] = cp["run"].getboolean(key)
            elif isinstance(default, int):
                values[key] = int(raw)
            elif isinstance(default, float):
                values[key] = float(raw)
            else:
                values[key] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    if "synthetic" in cp:
        values["synthetic"] = {k: json.loads(v) for k, v in cp["synthetic"].items()}
    cfg = RunConfig(**values)
    if cfg.data_dir and not Path(cfg.data_dir).is_absolute():
        cfg.data_dir = str((Path(path).parent / cfg.data_dir).resolve())
    cfg.validate()
    return cfg


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_segment(units_path, out_path) -> None:
    seqs = list(unitseq.read_unit_sequences(units_path))
    unitseq.write_segmented(out_path, (unitseq.segment_units(s) for s in seqs))


def query_bank(support: pairs.SupportSet, support_segmented) -> search.QueryBank:
    by_id = {u.utterance_id: u for u in support_segmented}
    bank = {}
    for label, items in support.by_class().items():
        bank[label] = [by_id[it.word_utterance].slice(tuple(it.word_span)) for it in items]
    return search.QueryBank(bank)


def stage_search(support_path, support_segmented_path, corpus_segmented_path, out_path,
                 scoring=unitseq.ScoringParams(), n=600, workers=1) -> list[search.MinedWord]:
    support = pairs.read_support(support_path)
    bank = query_bank(support, unitseq.read_segmented(support_segmented_path))
    corpus = unitseq.read_segmented(corpus_segmented_path)
    support_ids = {it.word_utterance for it in support.items}
    leaked = support_ids.intersection(u.utterance_id for u in corpus)
    if leaked:
        raise ValueError(f"support utterances found in the search corpus: {sorted(leaked)[:5]}")
    rankings = search.search_corpus(bank, corpus, scoring, workers)
    mined = [w for r in rankings for w in search.take_top_n(r, n)]
    search.write_mined_words(out_path, mined)
    return mined


def stage_mine_images(support_path, images_path, out_path, n=600, exclude_path=None) -> list[vision.ImageRanking]:
    support = pairs.read_support(support_path)
    ids, mat = vision.read_embeddings(images_path)
    row = dict(zip(ids, mat))
    sup = {
        label: [vision.ImageEmbedding(it.image_id, row[it.image_id]) for it in items]
        for label, items in support.by_class().items()
    }
    excluded = {it.image_id for it in support.items}
    if exclude_path:
        excluded |= set(_load(exclude_path)["image_ids"])
    pool = [vision.ImageEmbedding(i, v) for i, v in zip(ids, mat) if i not in excluded]
    rankings = vision.mine_images(sup, pool, n)
    _dump(out_path, [{"class": r.class_label, "entries": [list(e) for e in r.entries]} for r in rankings])
    return rankings


def read_image_rankings(path) -> list[vision.ImageRanking]:
    return [vision.ImageRanking(r["class"], tuple((i, float(s)) for i, s in r["entries"])) for r in _load(path)]


def stage_build_pairs(words_path, rankings_path, background_path, out_path,
                      n=600, val_fraction=0.1, seed=0) -> pairs.MinedPairSet:
    mined = search.read_mined_words(words_path)
    rankings = read_image_rankings(rankings_path)
    bg = _load(background_path)["image_ids"] if background_path else []
    ps = pairs.build_mined_pairs(mined, rankings, n, val_fraction, bg, seed)
    pairs.write_pairs(out_path, ps)
    return ps


def stage_support_pairs(support_path, background_path, out_path, val_fraction=0.1, seed=0) -> pairs.MinedPairSet:
    """No-mining ablation: the support set is the whole training pair set."""
    support = pairs.read_support(support_path)
    bg = _load(background_path)["image_ids"] if background_path else []
    ps = pairs.support_pairs(support, val_fraction, bg, seed)
    pairs.write_pairs(out_path, ps)
    return ps


def load_word_store(words_path) -> dict[str, np.ndarray]:
    ids, mat = vision.read_embeddings(words_path)
    return dict(zip(ids, mat))


def word_features_for(pair_set: pairs.MinedPairSet, store, regions_path=None) -> dict[str, np.ndarray]:
    """Features for every word in ``pair_set``: direct lookup, else isolation."""
    out, todo = {}, []
    for p in pair_set.pairs:
        if p.word_id in store:
            out[p.word_id] = store[p.word_id]
        else:
            todo.append((p.word_id, p.utterance_id, p.word_span))
    if todo:
        if regions_path is None:
            raise KeyError(f"no features for {len(todo)} words and no word regions to isolate them")
        out.update(isolate_word_features(store, _load(regions_path), todo))
    return out


def initial_params(init, d_aud, d_pix, d_emb, seed=0, scale=1.0) -> model.ModelParams:
    if init == "random":
        return model.init_params(d_aud, d_pix, d_emb, seed, scale)
    if init == "orthogonal":
        return model.orthogonal_params(d_aud, d_pix, d_emb)
    return model.load_checkpoint(init)


def stage_train(pairs_path, words_path, grids_path, out_path, regions_path=None,
                config=model.TrainConfig(), init="random", d_emb=32, init_scale=1.0):
    ps = pairs.read_pairs(pairs_path)
    store = load_word_store(words_path)
    grids = vision.read_grids(grids_path)
    words = word_features_for(ps, store, regions_path)
    d_aud = next(iter(words.values())).shape[0]
    d_pix = next(iter(grids.values())).shape[-1]
    p0 = initial_params(init, d_aud, d_pix, d_emb, config.seed, init_scale)
    params, hist = model.train(p0, ps, words, grids, config)
    model.save_checkpoint(out_path, params, hist)
    return params, hist


def _resolve(manifest_path, rel):
    return Path(manifest_path).parent / rel


def stage_eval_fewshot(checkpoint, test_set_path, report_path, episodes=1000, ways=5, seed=0,
                       support_path=None, config_echo=None) -> dict:
    params = model.load_checkpoint(checkpoint)
    ts = _load(test_set_path)
    words = load_word_store(_resolve(test_set_path, ts["word_store"]))
    grids = vision.read_grids(_resolve(test_set_path, ts["grid_store"]))
    exclude = set()
    if support_path:
        sup = pairs.read_support(support_path)
        exclude = {it.image_id for it in sup.items} | {it.word_utterance for it in sup.items}
    eps = evaluation.sample_episodes(ts["words"], ts["images"], ways, episodes, seed, exclude)
    results = evaluation.evaluate_episodes(params, eps, words, grids)
    summary = evaluation.summarize_episodes(results)
    acc = np.array([r.accuracy for r in results])
    blocks = np.array_split(acc, min(10, len(acc)))
    summary["block_std"] = float(np.std([b.mean() for b in blocks], ddof=1)) if len(blocks) > 1 else 0.0
    report = {"task": "fewshot_classification", "ways": ways, "seed": seed, "checkpoint": str(Path(checkpoint).name),
              "metrics": summary, "config": config_echo or {}}
    _dump(report_path, report)
    return report


def load_pool(pool_path, queries_per_class=20):
    man = _load(pool_path)
    words = load_word_store(_resolve(pool_path, man["word_store"]))
    grids = vision.read_grids(_resolve(pool_path, man["grid_store"]))
    queries = {}
    for c, ids in sorted(man["queries"].items()):
        if len(ids) < queries_per_class:
            raise ConfigError(f"class {c!r} has {len(ids)} query words, need {queries_per_class}")
        queries[c] = evaluation.average_queries([words[w] for w in ids[:queries_per_class]])
    images = tuple((r["image_id"], frozenset(r["labels"])) for r in man["images"])
    return evaluation.RetrievalPool(images, queries), grids


def stage_eval_retrieval(checkpoint, pool_path, report_path, queries_per_class=20, config_echo=None) -> dict:
    params = model.load_checkpoint(checkpoint)
    pool, grids = load_pool(pool_path, queries_per_class)
    res = evaluation.retrieve(params, pool, grids)
    report = {"task": "fewshot_retrieval", "queries_per_class": queries_per_class,
              "checkpoint": str(Path(checkpoint).name), "pool_size": len(pool.images),
              "metrics": {"p_at_n": res["p_at_n"], "per_class": res["per_class"], "skipped": res["skipped"]},
              "rankings": res["rankings"], "config": config_echo or {}}
    _dump(report_path, report)
    return report


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


STAGES = ("gen-synthetic", "segment", "search", "mine-images", "build-pairs", "train",
          "eval-fewshot", "eval-retrieval")


def run_dir_for(config: RunConfig) -> Path:
    return Path(config.run_root) / f"run_{config.digest()}"


def run_pipeline(config: RunConfig, start: str | None = None) -> Path:
    """Run every stage in order inside a run directory named by config hash.

    ``start`` skips earlier stages and reuses their files already present in
    the run directory.
    """
    config.validate()
    run = run_dir_for(config)
    run.mkdir(parents=True, exist_ok=True)
    _dump(run / "config.json", config.to_json())
    data = Path(config.data_dir) if config.data_dir else run / "data"
    f = {k: data / v for k, v in DATA_FILES.items()}
    echo = config.to_json()
    train_cfg = model.TrainConfig(config.lr, config.epochs, config.n_pos, config.n_neg, config.seed, config.patience)
    steps = {
        "gen-synthetic": lambda: (
            generate_synthetic(SyntheticSpec.from_json(config.synthetic), data) if config.synthetic else None
        ),
        "segment": lambda: (
            stage_segment(f["corpus_units"], run / "corpus.seg.jsonl"),
            stage_segment(f["support_units"], run / "support.seg.jsonl"),
        ),
        "search": lambda: stage_search(
            f["support"], run / "support.seg.jsonl", run / "corpus.seg.jsonl", run / "mined_words.json",
            config.scoring(), config.n, config.workers,
        ),
        "mine-images": lambda: stage_mine_images(f["support"], f["images"], run / "image_rankings.json",
                                                 config.n, f["background"]),
        "build-pairs": lambda: (
            stage_build_pairs(run / "mined_words.json", run / "image_rankings.json", f["background"],
                              run / "pairs.json", config.n, config.val_fraction, config.seed)
            if config.mining else
            stage_support_pairs(f["support"], f["background"], run / "pairs.json", config.val_fraction, config.seed)
        ),
        "train": lambda: stage_train(run / "pairs.json", f["words"], f["grids"], run / "model.bin",
                                     f["word_regions"], train_cfg, config.init, config.d_emb, config.init_scale),
        "eval-fewshot": lambda: stage_eval_fewshot(run / "model.bin", f["test_set"], run / "eval_fewshot.json",
                                                   config.episodes, config.ways, config.seed, f["support"], echo),
        "eval-retrieval": lambda: stage_eval_retrieval(run / "model.bin", f["pool"], run / "eval_retrieval.json",
                                                       config.queries_per_class, echo),
    }
    begin = STAGES.index(start) if start else 0
    for name in STAGES[begin:]:
        log.info("stage %s", name)
        try:
            steps[name]()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
    return run
