"""End-to-end tests of the plbert command line."""

import json

import pytest

from plbert import cli
from plbert.checkpoint import load_checkpoint, save_checkpoint
from plbert.errors import NumericError

from tests.conftest import CORPUS_PATH, LEXICON_PATH

SMALL_MODEL = [
    "--n-layers", "2", "--hidden", "16", "--intermediate", "32", "--heads", "2", "--embed", "8",
    "--max-len", "64", "--dropout", "0", "--precision", "float64",
]


def _build_vocab(tmp_path):
    assert cli.main([
        "build-vocab", "--lexicon", str(LEXICON_PATH), "--corpus", str(CORPUS_PATH),
        "--out-dir", str(tmp_path / "vocab"), "--quiet",
    ]) == 0
    return tmp_path / "vocab" / cli.PHONEME_VOCAB_FILE, tmp_path / "vocab" / cli.GRAPHEME_VOCAB_FILE


def _prepare(tmp_path, out_name="examples.bin"):
    pvocab, gvocab = _build_vocab(tmp_path)
    out = tmp_path / out_name
    assert cli.main([
        "prepare", "--corpus", str(CORPUS_PATH), "--lexicon", str(LEXICON_PATH),
        "--phoneme-vocab", str(pvocab), "--grapheme-vocab", str(gvocab), "--out", str(out), "--quiet",
    ]) == 0
    return pvocab, gvocab, out


def _train(tmp_path, pvocab, gvocab, examples, *extra):
    return cli.main([
        "train", "--examples", str(examples), "--phoneme-vocab", str(pvocab), "--grapheme-vocab", str(gvocab),
        "--out-dir", str(tmp_path / "run"), "--max-steps", "6", "--batch-size", "8", "--seed", "1", "--quiet",
        *SMALL_MODEL, *extra,
    ])


def test_full_pipeline(tmp_path, capsys):
    pvocab, gvocab, examples = _prepare(tmp_path)
    stats = json.loads((tmp_path / "examples.bin.stats.json").read_text())
    assert stats["sentences_kept"] == 50

    assert _train(tmp_path, pvocab, gvocab, examples) == 0
    checkpoint = tmp_path / "run" / "final.ckpt"
    assert checkpoint.exists()
    assert (tmp_path / "run" / "metrics.log").exists()

    capsys.readouterr()
    report_path = tmp_path / "report.json"
    assert cli.main([
        "probe", "--checkpoint", str(checkpoint), "--examples", str(examples), "--steps", "5",
        "--mlm-eval", "--report", str(report_path), "--quiet",
    ]) == 0
    out = capsys.readouterr().out
    assert out.startswith("top1=")
    assert "mlm_accuracy=" in out
    report = json.loads(report_path.read_text())
    assert report["probe"]["top1"] <= report["probe"]["top5"]
    assert report["mlm"]["n_eval"] > 0

    exported = tmp_path / "encoder.ckpt"
    assert cli.main(["export", "--checkpoint", str(checkpoint), "--out", str(exported), "--quiet"]) == 0
    loaded = load_checkpoint(exported)
    assert loaded.kind == "encoder"
    assert not loaded.params.has_heads


def test_prepare_is_byte_reproducible(tmp_path):
    _, _, first = _prepare(tmp_path, "a.bin")
    _, _, second = _prepare(tmp_path, "b.bin")
    assert first.read_bytes() == second.read_bytes()


def test_ablation_flags_reach_the_checkpoint(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples, "--no-p2g", "--score-only-msk") == 0
    state = load_checkpoint(tmp_path / "run" / "final.ckpt").state
    assert state["train_config"]["use_p2g"] is False
    assert state["train_config"]["score_only_msk"] is True


def test_both_ablations_is_a_usage_error(tmp_path, capsys):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples, "--no-p2g", "--no-mlm") == 1
    assert "no objective enabled" in capsys.readouterr().err


def test_invalid_mask_policy_is_a_usage_error(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples, "--mask-prob", "0.5") == 1


def test_preset_file_is_applied(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    preset = tmp_path / "preset.yaml"
    preset.write_text("train:\n  warmup_ratio: 0.5\n  learning_rate: 0.01\n")
    assert _train(tmp_path, pvocab, gvocab, examples, "--config", str(preset)) == 0
    state = load_checkpoint(tmp_path / "run" / "final.ckpt").state
    assert state["train_config"]["warmup_ratio"] == 0.5
    # explicit flags win over the preset
    assert state["train_config"]["max_steps"] == 6


def test_missing_preset_is_a_usage_error(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples, "--config", str(tmp_path / "nope.yaml")) == 1


def test_unknown_flag_prints_usage(capsys):
    assert cli.main(["train", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_is_a_usage_error():
    assert cli.main([]) == 1


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "build-vocab" in capsys.readouterr().out


def test_missing_input_is_a_data_error(tmp_path, capsys):
    assert cli.main([
        "build-vocab", "--lexicon", str(tmp_path / "none.tsv"), "--corpus", str(CORPUS_PATH),
        "--out-dir", str(tmp_path), "--quiet",
    ]) == 2
    assert capsys.readouterr().err.startswith("ERROR:")


def test_corrupt_examples_is_a_data_error(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    examples.write_bytes(examples.read_bytes()[:-5])
    assert _train(tmp_path, pvocab, gvocab, examples) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    pvocab, gvocab, examples = _prepare(tmp_path)

    def diverge(*args, **kwargs):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "train", diverge)
    assert _train(tmp_path, pvocab, gvocab, examples) == 3


def test_seed_falls_back_to_environment(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("PLBERT_SEED", "42")
    with caplog.at_level("INFO", logger="plbert.cli"):
        assert cli.main([
            "build-vocab", "--lexicon", str(LEXICON_PATH), "--corpus", str(CORPUS_PATH),
            "--out-dir", str(tmp_path),
        ]) == 0
    assert '"seed": 42' in caplog.text


def test_mlm_eval_needs_heads(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples) == 0
    exported = tmp_path / "encoder.ckpt"
    assert cli.main(["export", "--checkpoint", str(tmp_path / "run" / "final.ckpt"), "--out", str(exported)]) == 0
    assert cli.main([
        "probe", "--checkpoint", str(exported), "--examples", str(examples), "--steps", "1", "--mlm-eval", "--quiet",
    ]) == 1


def test_resume_continues_run(tmp_path):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples, "--checkpoint-every", "3") == 0
    midpoint = tmp_path / "run" / "step_0000003.ckpt"
    assert midpoint.exists()
    assert _train(tmp_path, pvocab, gvocab, examples, "--resume", str(midpoint), "--max-steps", "8") == 0
    assert load_checkpoint(tmp_path / "run" / "final.ckpt").state["train"]["step"] == 8


def test_non_finite_checkpoint_is_rejected(tmp_path, capsys):
    pvocab, gvocab, examples = _prepare(tmp_path)
    assert _train(tmp_path, pvocab, gvocab, examples) == 0
    params = load_checkpoint(tmp_path / "run" / "final.ckpt").params.encoder_only()
    params.tensors["block.ffn.output.bias"][0] = float("nan")
    broken = save_checkpoint(tmp_path / "broken.ckpt", params)

    capsys.readouterr()
    assert cli.main(["export", "--checkpoint", str(broken), "--out", str(tmp_path / "out.ckpt"), "--quiet"]) == 2
    assert "failed validation" in capsys.readouterr().err
    assert not (tmp_path / "out.ckpt").exists()
