import json

import pytest

from forest_nmt import __version__
from forest_nmt.cli import main, read_attention
from forest_nmt.exception_handlers import config_error_handler, exception_handler
from forest_nmt.exceptions import ConfigError
from tests.conftest import write_lines

SMALL = ["--hidden", "4", "--embed", "3", "--epochs", "2", "--batch", "8", "--min-freq", "1", "--seed", "3"]


@pytest.fixture
def toy_dir(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--out", str(data)]) == 0
    capsys.readouterr()
    return data


def train_args(data, out, mode="forest"):
    args = [
        "train",
        "--mode",
        mode,
        "--src",
        str(data / "toy.src"),
        "--tgt",
        str(data / "toy.tgt"),
        "--dev-src",
        str(data / "toy.src"),
        "--dev-tgt",
        str(data / "toy.tgt"),
        "--out",
        str(out),
        *SMALL,
    ]
    if mode == "forest":
        args += ["--forests", str(data / "toy.forest"), "--dev-forests", str(data / "toy.forest")]
    if mode == "tree":
        args += ["--trees", str(data / "toy.tree"), "--dev-trees", str(data / "toy.tree")]
    return args


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == __version__


def test_usage_lists_commands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for name in ("train", "translate", "eval", "check", "compare", "vocab", "generate"):
        assert f"  {name} " in out


def test_command_usage(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("usage: forest-nmt train [flags]")
    assert "--dev-forests VALUE" in out
    assert "--lowercase" in out


@pytest.mark.parametrize(
    "argv,message",
    [
        (["translate-all"], "unknown command 'translate-all'"),
        (["--colour"], "unknown option --colour"),
        (["--log-level", "LOUD", "check"], "--log-level must be one of"),
        (["check", "--bogus", "1"], "unknown flag --bogus"),
        (["check", "--trials", "zero"], "Input should be a valid integer"),
        (["check", "--trials", "0"], "Input should be greater than 0"),
        (["vocab", "--src", "missing.txt", "--out", "v.txt"], "Path does not point to a file"),
    ],
)
def test_configuration_errors(capsys, argv, message):
    assert main(argv) == 2
    assert message in capsys.readouterr().err


def test_forest_mode_without_forests(toy_dir, tmp_path, capsys):
    args = train_args(toy_dir, tmp_path / "run", mode="vanilla")
    args[args.index("vanilla")] = "forest"
    assert main(args) == 2
    err = capsys.readouterr().err
    assert "--mode forest needs --forests" in err
    detail = json.loads(err.splitlines()[1])["detail"]
    assert detail[0]["loc"] == ["flag", "--forests"]
    assert not (tmp_path / "run").exists()


def test_generate_toy_corpus(toy_dir):
    assert sorted(path.name for path in toy_dir.iterdir()) == ["toy.forest", "toy.src", "toy.tgt", "toy.tree"]
    assert len((toy_dir / "toy.src").read_text(encoding="utf-8").splitlines()) == 32


def test_generate_synthetic_splits(tmp_path, capsys):
    assert main(["generate", "--kind", "synthetic", "--pairs", "30", "--out", str(tmp_path)]) == 0
    lengths = {
        split: len((tmp_path / f"{split}.src").read_text(encoding="utf-8").splitlines())
        for split in ("train", "dev", "test")
    }
    assert lengths == {"train": 24, "dev": 3, "test": 3}
    assert len(capsys.readouterr().out.splitlines()) == 12


def test_generate_too_few_pairs(tmp_path, capsys):
    assert main(["generate", "--kind", "synthetic", "--pairs", "2", "--out", str(tmp_path)]) == 2
    assert "--pairs must be at least 3" in capsys.readouterr().err


def test_vocab(toy_dir, tmp_path, capsys):
    out = tmp_path / "vocab.txt"
    assert main(["vocab", "--src", str(toy_dir / "toy.src"), "--out", str(out), "--min-freq", "1"]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    counts = [int(line.split("\t")[1]) for line in lines]
    assert counts == sorted(counts, reverse=True)
    assert capsys.readouterr().out.startswith(f"{len(lines)} tokens (+4 reserved)")


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_train_translate_eval(toy_dir, tmp_path, capsys, mode):
    run = tmp_path / "run"
    assert main(train_args(toy_dir, run, mode)) == 0
    assert sorted(path.name for path in run.iterdir()) == ["manifest.json", "metrics.csv", "model.npz"]
    metrics = (run / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert metrics[0] == "epoch,train_loss,dev_perplexity,lr"
    assert len(metrics) == 3
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "train"
    assert manifest["config"]["mode"] == mode
    assert len(manifest["epoch_seconds"]) == 2
    assert len(manifest["inputs"]["src"]["sha256"]) == 64
    assert capsys.readouterr().out.startswith("best epoch ")

    hyp = tmp_path / "hyp.txt"
    attention = tmp_path / "attention.jsonl"
    translate = ["translate", "--checkpoint", str(run / "model.npz"), "--src", str(toy_dir / "toy.src")]
    translate += ["--out", str(hyp), "--dump-attention", str(attention)]
    if mode == "forest":
        translate += ["--forests", str(toy_dir / "toy.forest")]
    if mode == "tree":
        translate += ["--trees", str(toy_dir / "toy.tree")]
    assert main(translate) == 0
    assert len(hyp.read_text(encoding="utf-8").splitlines()) == 32
    records = read_attention(attention)
    assert len(records) == 32
    assert all(record.mode == mode for record in records)

    evaluate = ["eval", "--hyp", str(hyp), "--ref", str(toy_dir / "toy.tgt")]
    evaluate += ["--src", str(toy_dir / "toy.src"), "--buckets", "--report-dir", str(tmp_path / "report")]
    if mode != "vanilla":
        evaluate += ["--attention", str(attention)]
    assert main(evaluate) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("BLEU = ")
    assert out[1].startswith("bucket <=10   sentences 32 ")
    assert out[2].endswith("BLEU absent")
    reports = sorted(path.name for path in (tmp_path / "report").iterdir())
    expected = ["bleu.csv", "buckets.csv"] + (["attention_ratio.csv"] if mode != "vanilla" else [])
    assert reports == sorted(expected)


def test_training_is_reproducible(toy_dir, tmp_path, capsys):
    assert main(train_args(toy_dir, tmp_path / "a")) == 0
    assert main(train_args(toy_dir, tmp_path / "b")) == 0
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert first == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_vanilla_checkpoint_rejects_forests(toy_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(train_args(toy_dir, run, "vanilla")) == 0
    argv = ["translate", "--checkpoint", str(run / "model.npz"), "--src", str(toy_dir / "toy.src")]
    argv += ["--out", str(tmp_path / "hyp.txt"), "--forests", str(toy_dir / "toy.forest")]
    assert main(argv) == 2
    assert "vanilla checkpoints take no --forests or --trees" in capsys.readouterr().err


def test_misaligned_eval_is_a_data_error(tmp_path, capsys):
    hyp = write_lines(tmp_path / "hyp", ["a b", "c d"])
    ref = write_lines(tmp_path / "ref", ["a b", "c d", "e f"])
    assert main(["eval", "--hyp", str(hyp), "--ref", str(ref)]) == 3
    assert "2 hypotheses for 3 references" in capsys.readouterr().err


def test_buckets_need_sources(tmp_path, capsys):
    hyp = write_lines(tmp_path / "hyp", ["a b"])
    assert main(["eval", "--hyp", str(hyp), "--ref", str(hyp), "--buckets"]) == 2
    assert "--buckets needs --src" in capsys.readouterr().err


def test_check_passes(capsys):
    assert main(["check", "--trials", "1", "--forest-trials", "3"]) == 0
    assert capsys.readouterr().out.splitlines() == ["gradient: 4 cases, ok", "forest: 3 cases, ok"]


def test_check_reports_corrupted_gradient(capsys):
    assert main(["check", "--trials", "1", "--forest-trials", "1", "--corrupt", "dec.b_o"]) == 1
    captured = capsys.readouterr()
    assert "gradient: 4 cases, 3 FAILED" in captured.out
    assert "vanilla-loss failed in trial 0 (parameter dec.b_o)" in captured.err


def new_handler(exc: ConfigError) -> int:
    return 42


def test_new_handler(capsys):
    exception_handler[ConfigError] = new_handler
    try:
        assert main(["check", "--trials", "-1"]) == 42
    finally:
        exception_handler[ConfigError] = config_error_handler
    assert main(["check", "--trials", "-1"]) == 2


def test_contract_violation_reports_detail(tmp_path, capsys):
    hyp = write_lines(tmp_path / "hyp", ["a b c d"])
    attention = write_lines(
        tmp_path / "attention.jsonl", ['{"mode": "vanilla", "n_words": 2, "word_weights": [[0.5, 0.5]]}']
    )
    assert main(["eval", "--hyp", str(hyp), "--ref", str(hyp), "--attention", str(attention)]) == 1
    err = capsys.readouterr().err.splitlines()
    assert err[0] == "contract violation: attention_ratio: vanilla-mode attention has no phrase part"
    assert json.loads(err[1])["detail"] == [
        {
            "type": "vanilla_record",
            "loc": ["attention_ratio"],
            "msg": "vanilla-mode attention has no phrase part",
            "input": None,
        }
    ]


def test_compare_command(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--kind", "synthetic", "--pairs", "20", "--out", str(data)]) == 0
    capsys.readouterr()
    report = tmp_path / "compare.csv"
    argv = ["compare", "--data", str(data), "--seeds", "1", "--hidden", "4", "--embed", "3"]
    argv += ["--epochs", "1", "--tolerance", "100", "--report", str(report)]
    assert main(argv) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == ["forest", "tree", "vanilla"]
    assert all(line.endswith("over 1 seed(s)") for line in out)
    assert len(report.read_text(encoding="utf-8").splitlines()) == 4


def test_compare_needs_synthetic_splits(tmp_path, capsys):
    assert main(["compare", "--data", str(tmp_path)]) == 2
    assert "--data has no train.src" in capsys.readouterr().err
