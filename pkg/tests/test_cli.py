import json
import shutil

import pytest

from tracegrad.cli import EXIT_CONFIG, EXIT_DATA, EXIT_EVAL, EXIT_TRAINING, exit_code_for, main
from tracegrad.experiment import ExperimentConfig
from tracegrad.model import ConfigError
from tracegrad.training import TrainingError

TINY = {
    "seed": 3,
    "world": {"n_popular_entities": 12, "n_mutable_entities": 12, "n_new_entities_per_year": 6, "n_relations": 4},
    "model": {"context_length": 32, "n_blocks": 2, "d_model": 16, "n_heads": 2, "d_ff": 32},
    "pretrain": {"base_lr": 3e-3, "epochs": 2, "batch_size": 16, "micro_batch_size": 16},
    "continual": {"base_lr": 1e-3, "epochs": 1, "batch_size": 16, "micro_batch_size": 16},
    "profile": {"n_probe_examples": 10, "n_baseline_examples": 20},
    "years": [1, 2],
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("exp") / "run"
    assert main(["gen-corpus", "--config", str(config_path), "--out", str(out)]) == 0
    assert main(["pretrain", "--out", str(out)]) == 0
    return out


def _copy(src, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    return dst


def test_gen_corpus_files(pretrained):
    names = sorted(p.name for p in (pretrained / "data").iterdir())
    assert names == [
        "edits_y1.jsonl",
        "edits_y2.jsonl",
        "manifest.json",
        "probes_y1.jsonl",
        "probes_y2.jsonl",
        "snapshot.jsonl",
        "tokenizer.json",
    ]
    assert (pretrained / "config.json").exists() and (pretrained / "version.json").exists()


def test_gen_corpus_rerun_identical_manifest(pretrained, config_path, tmp_path):
    assert main(["gen-corpus", "--config", str(config_path), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again/data/manifest.json").read_text() == (pretrained / "data/manifest.json").read_text()


def test_manifest_snapshot_larger_than_edits(pretrained):
    files = json.loads((pretrained / "data/manifest.json").read_text())["files"]
    snap = files["snapshot.jsonl"]["tokens"]
    assert snap > files["edits_y1.jsonl"]["tokens"] and snap > files["edits_y2.jsonl"]["tokens"]


def test_existing_output_refused_without_force(pretrained, config_path, capsys):
    assert main(["gen-corpus", "--config", str(config_path), "--out", str(pretrained)]) == EXIT_CONFIG
    assert "--force" in capsys.readouterr().err


def test_saved_config_is_verbatim(pretrained):
    saved = ExperimentConfig.from_dict(json.loads((pretrained / "config.json").read_text()))
    assert saved == ExperimentConfig.from_dict(TINY)


def test_continual_fp_writes_plan(pretrained, tmp_path):
    out = _copy(pretrained, tmp_path)
    assert main(["continual", "--out", str(out), "--year", "1", "--tgl", "fp"]) == 0
    run = out / "continual/y1/vanilla+fp"
    plan = json.loads((run / "plan.json").read_text())
    assert plan["mode"] == "fp" and plan["frozen"]
    assert all(set(g) == {"block", "component"} for g in plan["frozen"])
    for name in ("model.ckpt", "metrics.csv", "profile.csv", "profile_plot.csv", "eval.json"):
        assert (run / name).exists()


def test_continual_same_seed_same_eval(pretrained, tmp_path):
    a, b = _copy(pretrained, tmp_path / "a"), _copy(pretrained, tmp_path / "b")
    for out in (a, b):
        assert main(["continual", "--out", str(out), "--year", "1"]) == 0
    ra = json.loads((a / "continual/y1/vanilla/eval.json").read_text())
    rb = json.loads((b / "continual/y1/vanilla/eval.json").read_text())
    assert ra == rb


def test_mixreview_uses_snapshot_replay(pretrained, tmp_path):
    out = _copy(pretrained, tmp_path)
    assert main(["continual", "--out", str(out), "--year", "1", "--method", "mixreview"]) == 0
    n_edits = len((out / "data/edits_y1.jsonl").read_text().splitlines())
    steps = len((out / "continual/y1/mixreview/metrics.csv").read_text().splitlines()) - 1
    assert steps == -(-3 * n_edits // TINY["continual"]["batch_size"])


def test_continual_without_prior_year_names_path(pretrained, tmp_path, capsys):
    out = _copy(pretrained, tmp_path)
    assert main(["continual", "--out", str(out), "--year", "2"]) == EXIT_DATA
    assert "continual/y1/vanilla/model.ckpt" in capsys.readouterr().err


def test_continual_without_pretrain(config_path, tmp_path, capsys):
    assert main(["gen-corpus", "--config", str(config_path), "--out", str(tmp_path)]) == 0
    assert main(["continual", "--out", str(tmp_path), "--year", "1"]) == EXIT_DATA
    assert "pretrain/model.ckpt" in capsys.readouterr().err


def test_profile_command(pretrained, tmp_path, capsys):
    out = _copy(pretrained, tmp_path)
    assert main(["profile", "--out", str(out), "--year", "1"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("attention: min") and "; mlp: min" in line
    rows = (out / "profile/y1/profile.csv").read_text().splitlines()
    assert len(rows) - 1 == 2 * TINY["model"]["n_blocks"]
    assert (out / "profile/y1/profile_plot.csv").read_text().startswith("block,attention_relative_norm,mlp_relative_norm")


def test_eval_and_report(pretrained, tmp_path, capsys):
    out = _copy(pretrained, tmp_path)
    for mode in ("none", "fp", "alr"):
        assert main(["continual", "--out", str(out), "--year", "1", "--tgl", mode]) == 0
    capsys.readouterr()
    assert main(["eval", "--out", str(out), "--year", "1", "--save", str(out / "pt.json")]) == 0
    assert "popular=" in capsys.readouterr().out
    assert main(["report", "--out", str(out), "--year", "1"]) == 0
    lines = (out / "reports/y1.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["Vanilla", "Vanilla + TGL with FP", "Vanilla + TGL with ALR"]
    assert lines[1].split(",")[4:7] == ["+0.0000"] * 3
    forgetting = (out / "reports/forgetting_y1.csv").read_text().splitlines()
    assert forgetting[1].startswith("Domain PT,")


def test_report_on_corrupt_eval_is_eval_error(pretrained, tmp_path):
    out = _copy(pretrained, tmp_path)
    assert main(["continual", "--out", str(out), "--year", "1"]) == 0
    (out / "continual/y1/vanilla/eval.json").write_text("{")
    assert main(["report", "--out", str(out), "--year", "1"]) == EXIT_EVAL


def test_unknown_config_key_is_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"pretrain": {"learning_rate": 1e-3}}))
    assert main(["gen-corpus", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err
    path.write_text(json.dumps({"sead": 1}))
    assert main(["gen-corpus", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_invalid_values_are_config_errors(tmp_path):
    path = tmp_path / "bad.json"
    for bad in ({"world": {"n_relations": 0}}, {"continual": {"base_lr": -1}}, {"years": [3]}, {"tgl_modes": ["x"]}):
        path.write_text(json.dumps(bad))
        assert main(["gen-corpus", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_corrupt_probe_file_is_data_error(pretrained, tmp_path):
    out = _copy(pretrained, tmp_path)
    (out / "data/probes_y1.jsonl").write_text('{"id": 1}\n')
    assert main(["eval", "--out", str(out), "--year", "1"]) == EXIT_DATA


def test_exit_code_mapping():
    assert exit_code_for(ConfigError("x")) == EXIT_CONFIG
    assert exit_code_for(TrainingError("x")) == EXIT_TRAINING
    assert exit_code_for(KeyError("x")) is None


def test_seed_flag_propagates(config_path, tmp_path):
    assert main(["gen-corpus", "--config", str(config_path), "--seed", "11", "--out", str(tmp_path)]) == 0
    saved = json.loads((tmp_path / "config.json").read_text())
    assert saved["seed"] == saved["world"]["seed"] == saved["pretrain"]["seed"] == saved["continual"]["seed"] == 11


def test_full_pipeline_reports_reproducible(config_path, tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--config", str(config_path), "--out", str(tmp_path / name)]) == 0
    for f in ("y1.csv", "y2.csv", "y1.txt", "forgetting_y2.csv"):
        assert (tmp_path / "a/reports" / f).read_bytes() == (tmp_path / "b/reports" / f).read_bytes()
