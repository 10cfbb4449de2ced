import json

import pytest

from amplify.cli import main
from amplify.config import TrainConfig

FAST = ["--model.d_model", "8", "--model.d_ff", "16", "--model.n_layers", "1", "--max_epochs", "1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(d), "--n-train", "80", "--n-test", "30", "--vocab-size", "40",
                 "--min-len", "4", "--max-len", "8", "--seed", "1"]) == 0
    return d


def _data(corpus, out):
    return ["--train", str(corpus / "train.jsonl"), "--test", str(corpus / "test.jsonl"), "--out", str(out)]


def test_gen_data_files(corpus):
    meta = json.loads((corpus / "meta.json").read_text())
    assert meta["seed"] == 1 and meta["spec"]["n_train"] == 80
    assert len((corpus / "train.jsonl").read_text().splitlines()) == 80


def test_train_then_eval_with_dump(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *_data(corpus, out), *FAST, "--seeds", "0", "--strategy.kind", "Amplify"]) == 0
    ck = out / "checkpoints" / "Amplify_seed0"
    assert (ck / "meta.json").exists() and (ck / "vocab.json").exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ck), "--data", str(corpus / "test.jsonl"),
                 "--dump-attention", str(tmp_path / "att")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 30 and 0 <= res["accuracy"] <= 1
    rec = json.loads((tmp_path / "att" / "batch00000.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"example", "layer", "head", "tokens", "weights"}


def test_config_file_and_flag_override(corpus, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nseeds = 0, 1\nmax_epochs = 1\nmodel.d_model = 8\nmodel.d_ff = 16\n"
                   "model.n_layers = 1\nstrategy.kind = NoMixup\n")
    out = tmp_path / "o"
    assert main(["compare", *_data(corpus, out), "--config", str(cfg), "--seeds", "3",
                 "--strategies", "NoMixup"]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[1].split(",")[4] == "1"  # one seed, from the flag
    assert (out / "metrics" / "NoMixup_n1_seed3.csv").exists()


def test_ttest_command(capsys, tmp_path):
    f = tmp_path / "b.txt"
    f.write_text("1.0\n2.0\n3.5\n")
    assert main(["ttest", "--a", "1,2,3", "--b", str(f)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0 < res["p"] <= 1


@pytest.mark.parametrize("extra", [["--lr", "abc"], ["--strategy.kind", "Bogus"], ["--model.n_heads", "3"],
                                   ["--batch_size", "1"], ["--no_such", "1"]])
def test_config_errors_exit_2(corpus, tmp_path, extra):
    argv = ["train", *_data(corpus, tmp_path), *extra]
    if extra[0] == "--no_such":
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2
    else:
        assert main(argv) == 2


def test_data_errors_exit_3(corpus, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"text": "a"}\n')
    assert main(["train", "--train", str(bad), "--test", str(corpus / "test.jsonl"), "--out", str(tmp_path)]) == 3
    assert main(["train", "--train", str(tmp_path / "missing.jsonl"), "--test", str(corpus / "test.jsonl"),
                 "--out", str(tmp_path)]) == 3
    labels = tmp_path / "labels.jsonl"
    labels.write_text('{"text": "a b", "label": 7}\n{"text": "c", "label": 0}\n')
    assert main(["train", "--train", str(labels), "--test", str(corpus / "test.jsonl"), "--out", str(tmp_path),
                 *FAST]) == 3


def test_divergence_exit_4(corpus, tmp_path, capsys):
    assert main(["train", *_data(corpus, tmp_path), *FAST, "--seeds", "0", "--lr", "1e300",
                 "--max_epochs", "3"]) == 4
    assert "non-finite" in capsys.readouterr().err


def test_every_field_has_a_flag():
    from amplify.cli import build_parser
    from amplify.config import FIELD_TYPES, flatten

    assert set(flatten(TrainConfig())) == set(FIELD_TYPES)
    help_text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for key in FIELD_TYPES:
        assert f"--{key}" in help_text
