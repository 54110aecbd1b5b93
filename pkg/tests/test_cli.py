import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from stemsplit import corpus
from stemsplit.audio_io import AudioBuffer, read_wav, write_wav
from stemsplit.cli import main

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"
SMALL_MODEL = ["--preset", "toy", "--hidden", "8", "--lstm-hidden", "4", "--chunk-s", "1.0", "--batch-size", "2"]


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["mix", "--preset", "toy", "--count", "3", "--duration", "4", "--seed", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(toy_corpus), *SMALL_MODEL, "--epochs", "2", "--out", str(out)]) == 0
    return out


def test_mix_writes_corpus(toy_corpus):
    dirs = corpus.list_mixtures(toy_corpus)
    assert [d.name for d in dirs] == ["train_00000", "train_00001", "train_00002"]
    mix, stems, manifest = corpus.load_mixture(dirs[0])
    assert mix.sample_rate == 8000 and len(mix) == 4 * 8000
    total = stems["music"].samples + stems["speech"].samples + stems["sfx"].samples
    assert np.max(np.abs(mix.samples - total)) < 1e-6
    jsonschema.validate(json.loads((dirs[0] / "manifest.json").read_text()), schema("manifest"))
    stats = json.loads((toy_corpus / "corpus_stats.json").read_text())
    jsonschema.validate(stats, schema("corpus_stats"))
    assert stats["mixtures"] == 3
    jsonschema.validate(json.loads((toy_corpus / "pools" / "pools.json").read_text()), schema("pools"))


def test_mix_is_byte_reproducible(toy_corpus, tmp_path):
    args = ["mix", "--preset", "toy", "--count", "3", "--duration", "4", "--seed", "5"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    a = tree_bytes(tmp_path / "a")
    assert a == tree_bytes(tmp_path / "b")
    assert a == tree_bytes(toy_corpus)


def test_mix_missing_class_exits_2(toy_corpus, tmp_path, capsys):
    pools = json.loads((toy_corpus / "pools" / "pools.json").read_text())
    del pools["splits"]["train"]["speech"]
    path = tmp_path / "no_speech.json"
    path.write_text(json.dumps(pools))
    code = main(["mix", "--pools", str(path), "--count", "1", "--duration", "2", "--json-errors", "--out", str(tmp_path / "out")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]
    assert err["code"] == 2 and err["field"] == "pools.splits.train.speech"


def test_mix_profiles_file(toy_corpus, tmp_path):
    profiles = {"sfx_fg": {"lambda": 0}, "sfx_bg": {"lambda": 0}}
    jsonschema.validate(profiles, schema("profiles"))
    (tmp_path / "profiles.json").write_text(json.dumps(profiles))
    pools = toy_corpus / "pools" / "pools.json"
    args = ["mix", "--pools", str(pools), "--profiles", str(tmp_path / "profiles.json"), "--count", "1", "--duration", "3"]
    assert main([*args, "--out", str(tmp_path / "out")]) == 0
    _, stems, manifest = corpus.load_mixture(tmp_path / "out" / "train_00000")
    assert not np.any(stems["sfx"].samples)
    assert not manifest.events_of("sfx_fg", "sfx_bg")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["mix", "--count", "x", "--out", str(tmp_path)]) == 2
    assert main(["nosuchcommand"]) == 2
    assert main(["mix", "--out", str(tmp_path)]) == 2  # neither --pools nor --preset
    assert main(["evaluate", "--references", str(tmp_path / "none"), "--estimates", "mixture", "--out", str(tmp_path)]) == 2
    assert "validation error" in capsys.readouterr().err


def test_config_file_supplies_options(toy_corpus, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(toy_corpus), "frame": 2.0}))
    assert main(["stats", "--config", str(cfg)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["frames"] == 6
    cfg.write_text(json.dumps({"data": str(toy_corpus), "bogus": 1}))
    assert main(["stats", "--config", str(cfg), "--json-errors"]) == 2
    assert json.loads(capsys.readouterr().err)["error"]["field"] == "config.bogus"


def test_train_outputs(trained):
    history = json.loads((trained / "history.json").read_text())
    jsonschema.validate(history, schema("history"))
    assert [h["epoch"] for h in history] == [1, 2]
    assert (trained / "checkpoints" / "epoch_0002.ckpt").exists()
    assert (trained / "last.ckpt").read_bytes()[:8] == b"MRXCKPT1"
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["model"]["hidden"] == 8


def test_train_is_byte_reproducible(toy_corpus, trained, tmp_path):
    assert main(["train", "--data", str(toy_corpus), *SMALL_MODEL, "--epochs", "2", "--out", str(tmp_path)]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(trained)


def test_train_resume_matches_uninterrupted(toy_corpus, trained, tmp_path):
    first = trained / "checkpoints" / "epoch_0001.ckpt"
    assert main(["train", "--data", str(toy_corpus), "--resume", str(first), "--epochs", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()


def test_separate_keeps_length(trained, toy_corpus, tmp_path):
    mix = toy_corpus / "train_00000" / "mix.wav"
    assert main(["separate", "--checkpoint", str(trained / "last.ckpt"), "--input", str(mix), "--out", str(tmp_path)]) == 0
    n = len(read_wav(mix))
    for name in ("music", "speech", "sfx"):
        stem = read_wav(tmp_path / f"{name}.wav")
        assert stem.sample_rate == 8000 and len(stem) == n


def test_separate_rate_mismatch(trained, tmp_path, capsys):
    src = tmp_path / "in16k.wav"
    x = np.random.default_rng(0).standard_normal(16000 + 7) * 0.1
    write_wav(src, AudioBuffer(x, 16000))
    ckpt = str(trained / "last.ckpt")
    assert main(["separate", "--checkpoint", ckpt, "--input", str(src), "--json-errors", "--out", str(tmp_path / "a")]) == 2
    assert json.loads(capsys.readouterr().err)["error"]["field"] == "sample_rate"
    args = ["separate", "--checkpoint", ckpt, "--input", str(src), "--process-rate", "8000", "--out", str(tmp_path / "b")]
    assert main(args) == 0
    stem = read_wav(tmp_path / "b" / "speech.wav")
    assert stem.sample_rate == 16000 and len(stem) == len(x)
    wrong = ["separate", "--checkpoint", ckpt, "--input", str(src), "--process-rate", "16000", "--out", str(tmp_path / "c")]
    assert main(wrong) == 2


def test_separate_missing_checkpoint(tmp_path):
    assert main(["separate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--input", "x.wav", "--out", str(tmp_path)]) == 2


def _evaluate(refs, estimates, out, *extra):
    assert main(["evaluate", "--references", str(refs), "--estimates", str(estimates), "--out", str(out), *extra]) == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, schema("report"))
    return doc


def _cells(doc):
    for sources in doc["scenarios"].values():
        yield from sources.values()


def test_evaluate_mixture_gives_zero_improvement(toy_corpus, tmp_path, capsys):
    doc = _evaluate(toy_corpus, "mixture", tmp_path, "--oracle", "psf")
    for cell in _cells(doc):
        if cell["kind"] == "improvement" and cell["count"]:
            assert cell["value"] == 0.0
    assert doc["mixtures"] == ["train_00000", "train_00001", "train_00002"]
    assert "oracle_psf" in doc
    assert (tmp_path / "report.txt").read_text() in capsys.readouterr().out


def test_evaluate_references_reach_cap(toy_corpus, tmp_path):
    est = tmp_path / "est"
    for d in corpus.list_mixtures(toy_corpus):
        (est / d.name).mkdir(parents=True)
        for name in ("music", "speech", "sfx"):
            (est / d.name / f"{name}.wav").write_bytes((d / f"{name}.wav").read_bytes())
    doc = _evaluate(toy_corpus, est, tmp_path / "out", "--jobs", "2")
    for cell in _cells(doc):
        if cell["count"] and cell["kind"] == "absolute":
            assert cell["value"] > 79
        if cell["count"] and cell["kind"] == "pes":
            assert cell["value"] == pytest.approx(-80.0)
