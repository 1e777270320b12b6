import json
import shutil
from pathlib import Path

import pytest

from wordmine import cli
from wordmine.errors import ConfigError, StageError
from wordmine.pipeline import RunConfig, load_config, run_dir_for, run_pipeline

SMALL = dict(utterances_per_class=15, background_utterances=10, pool_images_per_class=10,
             pool_background_images=10, background_images=15, test_words_per_class=6,
             test_images_per_class=6)


def small_config(root, **kw):
    base = dict(run_root=str(root), n=10, epochs=3, episodes=40, queries_per_class=5, synthetic=dict(SMALL))
    base.update(kw)
    return RunConfig(**base)


def snapshot(run: Path) -> dict:
    return {str(p.relative_to(run)): p.read_bytes() for p in sorted(run.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    run = run_pipeline(small_config(root))
    return root, run


def test_run_produces_reports(finished_run):
    _, run = finished_run
    for name in ("config.json", "mined_words.json", "image_rankings.json", "pairs.json", "model.bin",
                 "eval_fewshot.json", "eval_retrieval.json"):
        assert (run / name).is_file(), name
    rep = json.loads((run / "eval_fewshot.json").read_text())
    assert 0.0 <= rep["metrics"]["accuracy"] <= 1.0
    assert rep["metrics"]["episodes"] == 40
    assert "block_std" in rep["metrics"]
    ret = json.loads((run / "eval_retrieval.json").read_text())
    assert 0.0 <= ret["metrics"]["p_at_n"] <= 1.0


def test_rerun_is_byte_identical(finished_run):
    root, run = finished_run
    before = snapshot(run)
    shutil.rmtree(run)
    again = run_pipeline(small_config(root))
    assert again == run
    assert snapshot(again) == before


def test_resume_from_stage_reproduces_outputs(finished_run, tmp_path):
    root, run = finished_run
    before = snapshot(run)
    run_pipeline(small_config(root), start="train")
    assert snapshot(run) == before


def test_config_hash_names_run(tmp_path):
    a, b = small_config(tmp_path), small_config(tmp_path, seed=1)
    assert run_dir_for(a) != run_dir_for(b)
    assert run_dir_for(a) == run_dir_for(small_config(tmp_path))


def test_zero_shots_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(small_config(tmp_path, shots=0))


def test_missing_data_is_reported_with_stage(tmp_path):
    cfg = RunConfig(run_root=str(tmp_path / "r"), data_dir=str(tmp_path / "nowhere"))
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "segment"
    assert "segment" in str(err.value)


def test_load_config(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nn = 20\nmining = false\nlr = 0.01\n[synthetic]\nnoise = 0.1\ngrid_hw = [2, 2]\n")
    cfg = load_config(ini)
    assert cfg.n == 20 and cfg.mining is False and cfg.lr == 0.01
    assert cfg.synthetic == {"noise": 0.1, "grid_hw": [2, 2]}
    ini.write_text("[run]\nnn = 20\n[synthetic]\n")
    with pytest.raises(ConfigError):
        load_config(ini)
    ini.write_text("[run]\nshots = 0\n[synthetic]\nnoise = 0.0\n")
    with pytest.raises(ConfigError):
        load_config(ini)


def test_shipped_config_parses():
    cfg = load_config(Path(__file__).parent.parent / "configs" / "synthetic.ini")
    assert cfg.n == 50 and cfg.shots == 5


def test_cli_stages(tmp_path, capsys):
    data, out = tmp_path / "data", tmp_path / "out"
    out.mkdir()
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMALL))
    assert cli.main(["gen-synthetic", "--out", str(data), "--spec", str(spec)]) == 0
    steps = [
        ["segment", "--units", f"{data}/units/corpus.jsonl", "--out", f"{out}/corpus.seg.jsonl"],
        ["search", "--queries", f"{data}/support.json", "--corpus", f"{out}/corpus.seg.jsonl",
         "--n", "10", "--out", f"{out}/mined.json", "--workers", "2"],
        ["mine-images", "--support", f"{data}/support.json", "--images", f"{data}/vision/images.emb",
         "--n", "10", "--out", f"{out}/ranked.json", "--exclude", f"{data}/vision/background.json"],
        ["build-pairs", "--words", f"{out}/mined.json", "--images", f"{out}/ranked.json",
         "--background", f"{data}/vision/background.json", "--n", "10", "--out", f"{out}/pairs.json"],
        ["train", "--pairs", f"{out}/pairs.json", "--words", f"{data}/audio/words.emb",
         "--regions", f"{data}/audio/word_regions.json", "--grids", f"{data}/vision/grids.grd",
         "--epochs", "2", "--d-emb", "8", "--out", f"{out}/model.bin"],
        ["eval-fewshot", "--checkpoint", f"{out}/model.bin", "--test-set", f"{data}/test_set.json",
         "--support", f"{data}/support.json", "--episodes", "20", "--report", f"{out}/fewshot.json"],
        ["eval-retrieval", "--checkpoint", f"{out}/model.bin", "--pool", f"{data}/pool.json",
         "--queries-per-class", "5", "--report", f"{out}/retrieval.json"],
        ["build-pairs", "--from-support", f"{data}/support.json",
         "--background", f"{data}/vision/background.json", "--out", f"{out}/support_pairs.json"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    printed = capsys.readouterr().out
    assert "accuracy" in printed and "P@N" in printed
    assert json.loads((out / "fewshot.json").read_text())["metrics"]["episodes"] == 20


def test_cli_reports_errors(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[run]\nshots = 0\n[synthetic]\nnoise = 0.0\n")
    assert cli.main(["run-all", "--config", str(ini)]) == 2
    assert "error" in capsys.readouterr().err
