import json

import numpy as np
import pytest

from wordmine.errors import ConfigError
from wordmine.synthetic import SyntheticSpec, frame_error_rate, generate_synthetic, matched_frame_noise
from wordmine.unitseq import read_unit_sequences, segment_units
from wordmine.vision import read_embeddings, read_grids

SMALL = dict(utterances_per_class=20, background_utterances=10, pool_images_per_class=10,
             pool_background_images=10, background_images=15, test_words_per_class=6,
             test_images_per_class=6)


def load(files):
    gold = json.load(open(files["gold"]))
    regions = json.load(open(files["word_regions"]))
    corpus = {u.utterance_id: segment_units(u) for u in read_unit_sequences(files["corpus_units"])}
    return gold, regions, corpus


def substitutions(gold, regions, corpus):
    n = 0
    for uid, labels in gold["utterances"].items():
        if labels:
            s, e = regions[uid]
            word = corpus[uid].symbols[s:e].tolist()
            n += sum(a != b for a, b in zip(word, gold["templates"][labels[0]]))
    return n


def test_noiseless_words_planted_verbatim(tmp_path):
    files = generate_synthetic(SyntheticSpec(**SMALL), tmp_path)
    gold, regions, corpus = load(files)
    assert gold["corrupted_segments"] == 0
    assert substitutions(gold, regions, corpus) == 0
    assert sum(bool(v) for v in gold["utterances"].values()) == 5 * 20


@pytest.mark.parametrize("noise", [0.1, 0.3])
def test_substitution_count(tmp_path, noise):
    files = generate_synthetic(SyntheticSpec(noise=noise, seed=4, **SMALL), tmp_path)
    gold, regions, corpus = load(files)
    counted = substitutions(gold, regions, corpus)
    assert counted == gold["corrupted_segments"]
    n = gold["planted_segments"]
    assert abs(counted / n - noise) < 4 * np.sqrt(noise * (1 - noise) / n)


def test_ids_carry_no_labels(tmp_path):
    files = generate_synthetic(SyntheticSpec(**SMALL), tmp_path)
    gold, _, corpus = load(files)
    assert not any("class" in uid for uid in corpus)
    assert not any("class" in i for i in gold["pool_image_ids"])


def test_generated_files_are_consistent(tmp_path):
    spec = SyntheticSpec(**SMALL)
    files = generate_synthetic(spec, tmp_path)
    ids, mat = read_embeddings(files["words"])
    assert mat.shape == (len(ids), spec.d_aud)
    grids = read_grids(files["grids"])
    g = next(iter(grids.values()))
    assert g.shape == (*spec.grid_hw, spec.d_pix)
    support = json.load(open(files["support"]))
    assert support["ways"] == 5 and support["shots"] == 5
    for item in support["items"]:
        assert item["image_id"] in grids
    bg = json.load(open(files["background"]))["image_ids"]
    assert len(bg) == 15 and all(i in grids for i in bg)
    pool = json.load(open(files["pool"]))
    n_imp = sum(not r["labels"] for r in pool["images"])
    assert n_imp == pytest.approx(0.5 * len(pool["images"]), abs=1)


def test_same_seed_same_bytes(tmp_path):
    a = generate_synthetic(SyntheticSpec(noise=0.1, **SMALL), tmp_path / "a")
    b = generate_synthetic(SyntheticSpec(noise=0.1, **SMALL), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes(), k


def test_matched_frame_noise_hits_rate():
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(30, 16))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    sigma = matched_frame_noise(protos, 0.1, seed=0)
    assert frame_error_rate(protos, sigma, np.random.default_rng(99), draws=50000) == pytest.approx(0.1, abs=0.01)
    assert matched_frame_noise(protos, 0.0) == 0.0


@pytest.mark.parametrize("bad", [
    dict(noise=1.0), dict(separation=0.0), dict(vocab_size=3), dict(disjoint_units=True, vocab_size=10),
    dict(n_classes=1), dict(word_len=(3, 2)), dict(object_pixels=(1, 20)),
])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        SyntheticSpec(**bad)


def test_spec_json_round_trip():
    spec = SyntheticSpec(noise=0.2, grid_hw=(2, 4))
    assert SyntheticSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    with pytest.raises(ConfigError):
        SyntheticSpec.from_json({"nosie": 0.1})
