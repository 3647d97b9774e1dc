import json

import numpy as np
import pytest
from typer.testing import CliRunner

from cli import app
from core.checkpoint import save_checkpoint

runner = CliRunner()

TINY_TOML = """
[model]
hidden_dim = 16
n_heads = 2
n_layers = 1
max_len = 24
vocab_size = 260
disc_layers = 1

[optimizer]
lr = 0.001

[train]
seed = 0
batch_size = 1
steps = 1
window = 24
n_ctx = 8
n_gen = 4
eval_items = 20
eval_interval = 1
"""


@pytest.fixture
def workspace(tmp_path, tiny_specs):
    specs = tmp_path / "styles.json"
    specs.write_text(json.dumps([s.model_dump() for s in tiny_specs]), encoding="utf-8")
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY_TOML, encoding="utf-8")
    corpus = tmp_path / "corpus.jsonl"
    result = runner.invoke(app, ["make-corpus", "--specs", str(specs), "--docs-per-style", "10",
                                 "--seed", "3", "--out", str(corpus)])
    assert result.exit_code == 0, result.output
    return tmp_path, specs, cfg, corpus


def test_make_corpus_is_deterministic(workspace):
    root, specs, _, corpus = workspace
    again = root / "again.jsonl"
    result = runner.invoke(app, ["make-corpus", "--specs", str(specs), "--docs-per-style", "10",
                                 "--seed", "3", "--out", str(again)])
    assert result.exit_code == 0
    assert again.read_bytes() == corpus.read_bytes()
    assert len(corpus.read_text(encoding="utf-8").splitlines()) == 30
    manifest = json.loads(corpus.with_suffix(".manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "make-corpus" and manifest["seed"] == 3
    assert manifest["finished_at"] is not None


def test_make_corpus_rejects_zero_documents(tmp_path):
    result = runner.invoke(app, ["make-corpus", "--docs-per-style", "0", "--out", str(tmp_path / "c.jsonl")])
    assert result.exit_code == 2


def test_make_corpus_reports_invalid_specs(tmp_path):
    specs = tmp_path / "bad.json"
    specs.write_text("[]", encoding="utf-8")
    result = runner.invoke(app, ["make-corpus", "--specs", str(specs), "--out", str(tmp_path / "c.jsonl")])
    assert result.exit_code == 1
    assert "ConfigurationError" in result.output


def test_train_without_language_model_names_the_missing_phase(workspace):
    root, _, cfg, corpus = workspace
    result = runner.invoke(app, ["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(root / "run"),
                                 "--no-progress"])
    assert result.exit_code == 1
    assert "pretrain-lm" in result.output


def test_train_rejects_unknown_variant(workspace):
    root, _, cfg, corpus = workspace
    result = runner.invoke(app, ["train", "--config", str(cfg), "--corpus", str(corpus), "--variant", "E"])
    assert result.exit_code == 2


def test_generate_rejects_zero_tokens(tmp_path):
    ref = tmp_path / "ref.txt"
    ref.write_text("0123", encoding="utf-8")
    result = runner.invoke(app, ["generate", "--checkpoint", str(tmp_path / "g.styf"), "--context", "abc",
                                 "--reference", str(ref), "--n-tokens", "0"])
    assert result.exit_code == 2


def test_generate_reports_corrupt_checkpoint(tmp_path, make_bundle):
    bundle = make_bundle("D")
    path = save_checkpoint(tmp_path / "g.styf", bundle, "generator", bundle.config)
    data = bytearray(path.read_bytes())
    data[100] ^= 0xFF
    path.write_bytes(bytes(data))
    ref = tmp_path / "ref.txt"
    ref.write_text("0123 4567", encoding="utf-8")
    result = runner.invoke(app, ["generate", "--checkpoint", str(path), "--context", "ABCD",
                                 "--reference", str(ref), "--n-tokens", "4"])
    assert result.exit_code == 1
    assert "IntegrityError" in result.output


def test_generate_writes_text_and_features(tmp_path, make_bundle):
    bundle = make_bundle("D")
    path = save_checkpoint(tmp_path / "g.styf", bundle, "generator", bundle.config)
    ref = tmp_path / "ref.txt"
    ref.write_text("0123 4567", encoding="utf-8")
    feats = tmp_path / "out" / "feats.npy"
    args = ["generate", "--checkpoint", str(path), "--context", "ABCD", "--reference", str(ref),
            "--n-tokens", "4", "--emit-features", str(feats)]
    first = runner.invoke(app, args)
    second = runner.invoke(app, args)
    assert first.exit_code == 0, first.output
    assert first.output == second.output
    assert np.load(feats).shape == (4, bundle.config.hidden_dim)


def test_generate_warns_when_it_truncates_inputs(tmp_path, make_bundle):
    bundle = make_bundle("D")
    max_len = bundle.config.max_len
    path = save_checkpoint(tmp_path / "g.styf", bundle, "generator", bundle.config)
    ref = tmp_path / "ref.txt"
    ref.write_text("0123 " * max_len, encoding="utf-8")
    result = runner.invoke(app, ["generate", "--checkpoint", str(path), "--context", "ABCD" * max_len,
                                 "--reference", str(ref), "--n-tokens", "4"])
    assert result.exit_code == 0, result.output
    assert f"reference truncated to its first {max_len}" in result.output
    assert f"context truncated to its last {max_len - 4}" in result.output

    quiet = runner.invoke(app, ["generate", "--checkpoint", str(path), "--context", "ABCD",
                                "--reference", str(ref), "--n-tokens", "4"])
    assert "context truncated" not in quiet.output


def test_full_pipeline_produces_an_evaluation_report(workspace):
    root, _, cfg, corpus = workspace
    run = root / "run"
    common = ["--config", str(cfg), "--corpus", str(corpus), "--out", str(run), "--no-progress"]
    for command in (["pretrain-lm"], ["pretrain-comparator"], ["train", "--variant", "A"]):
        result = runner.invoke(app, command + common)
        assert result.exit_code == 0, result.output
    for name in ("lm.styf", "lm.json", "lm_log.jsonl", "comparator.styf", "generator-A.styf",
                 "discriminator-A.styf", "train_A_log.jsonl", "train_A.manifest.json"):
        assert (run / name).exists(), name
    sidecar = json.loads((run / "generator-A.json").read_text(encoding="utf-8"))
    assert sidecar["variant"] == "A" and sidecar["final_fed"] >= 0.0

    report_path = run / "report.json"
    result = runner.invoke(app, ["evaluate", "--checkpoint", str(run / "generator-A.styf"), "--corpus", str(corpus),
                                 "--n-samples", "3", "--out", str(report_path), "--no-progress"])
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert set(report) == {"fluency", "style_score", "diversity", "novelty", "per_style", "n"}
    assert set(report["diversity"]) == {"value", "lower", "upper"}
    assert report["n"] == 3
    samples = json.loads((run / "report_samples.json").read_text(encoding="utf-8"))
    assert "A" in samples
    assert (run / "report.csv").read_text(encoding="utf-8").startswith("model,style,fluency,style_score")


def test_evaluate_without_checkpoint_exits_with_error(workspace):
    root, _, _, corpus = workspace
    result = runner.invoke(app, ["evaluate", "--checkpoint", str(root / "missing.styf"), "--corpus", str(corpus)])
    assert result.exit_code == 1
    assert "MissingArtifactError" in result.output
