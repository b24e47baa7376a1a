import sys

import numpy as np
import pytest
from dirty_equals import IsPartialDict

from forest_nmt.corpus import Bitext, SentencePair, build_vocab
from forest_nmt.evaluation import perplexity
from forest_nmt.exceptions import CheckpointError, ConfigError, DataError, DimensionError, NumericError
from forest_nmt.model import NMTModel
from forest_nmt.train import (
    META_KEY,
    Checkpoint,
    TrainConfig,
    clip_gradients,
    load_checkpoint,
    save_checkpoint,
    sentence_gradients,
    sgd_step,
    train,
)
from tests.conftest import match_pydantic_error_url, small_params


def toy_model(corpus, mode="forest", seed=0):
    return NMTModel.create(
        mode,
        build_vocab(corpus.bitext.sources(), 1),
        build_vocab(corpus.bitext.targets(), 1),
        embed=3,
        hidden=4,
        seed=seed,
        init_scale=0.3,
    )


def small_config(**overrides):
    values = dict(mode="forest", hidden=4, embed=3, batch_size=8, max_epochs=2, min_freq=1, patience=None)
    values.update(overrides)
    return TrainConfig.build(**values)


def test_config_defaults():
    config = TrainConfig.build()
    assert config.mode == "forest"
    assert (config.hidden, config.embed, config.batch_size) == (256, 256, 128)
    assert config.lr_decay == 0.5
    assert config.patience == 3


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError) as exc_info:
        TrainConfig.build(hidden=0, mode="graph")
    assert exc_info.value.errors == [
        {
            "type": "literal_error",
            "loc": ("config", "mode"),
            "msg": "Input should be 'vanilla', 'tree' or 'forest'",
            "input": "graph",
            "ctx": {"expected": "'vanilla', 'tree' or 'forest'"},
            "url": match_pydantic_error_url("literal_error"),
        },
        {
            "type": "greater_than",
            "loc": ("config", "hidden"),
            "msg": "Input should be greater than 0",
            "input": 0,
            "ctx": {"gt": 0},
            "url": match_pydantic_error_url("greater_than"),
        },
    ]


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as exc_info:
        TrainConfig.build(dropout=0.2)
    assert exc_info.value.errors == [
        {
            "type": "extra_forbidden",
            "loc": ("config", "dropout"),
            "msg": "Extra inputs are not permitted",
            "input": 0.2,
            "url": match_pydantic_error_url("extra_forbidden"),
        }
    ]


def test_checkpoint_round_trip(tmp_path, toy_corpus):
    model = toy_model(toy_corpus)
    path = tmp_path / "out" / "model.npz"
    save_checkpoint(Checkpoint.snapshot(model, small_config(), 3, 12.5), path)
    checkpoint = load_checkpoint(path, expected_mode="forest")
    assert (checkpoint.mode, checkpoint.epoch, checkpoint.dev_perplexity) == ("forest", 3, 12.5)
    assert checkpoint.config == small_config()
    restored = checkpoint.to_model()
    assert restored.src_vocab == model.src_vocab
    assert restored.tgt_vocab == model.tgt_vocab
    for pair in toy_corpus.bitext.pairs[:4]:
        assert restored.loss(pair).item() == model.loss(pair).item()
    assert [p.name for p in tmp_path.joinpath("out").iterdir()] == ["model.npz"]


def test_snapshot_is_a_copy(toy_corpus):
    model = toy_model(toy_corpus)
    checkpoint = Checkpoint.snapshot(model, small_config(), 1, 2.0)
    model.params["dec.b_o"].data[...] += 1.0
    assert not np.array_equal(checkpoint.arrays["dec.b_o"], model.params["dec.b_o"].data)


def test_checkpoint_mode_mismatch(tmp_path, toy_corpus):
    path = tmp_path / "model.npz"
    save_checkpoint(Checkpoint.snapshot(toy_model(toy_corpus), small_config(), 1, 2.0), path)
    with pytest.raises(ConfigError) as exc_info:
        load_checkpoint(path, expected_mode="tree")
    assert exc_info.value.errors == [IsPartialDict(type="mode_mismatch", loc=("config", "mode"), input="tree")]


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "model.npz"
    path.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)
    assert exc_info.value.errors == [IsPartialDict(type="corrupt_checkpoint", loc=("checkpoint", str(path)))]
    assert isinstance(exc_info.value, DataError)


def test_checkpoint_without_metadata(tmp_path):
    path = tmp_path / "model.npz"
    np.savez(path, **{"param/dec.b_o": np.zeros(3)})
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)
    assert exc_info.value.errors == [IsPartialDict(type="corrupt_checkpoint")]


def test_checkpoint_from_another_format(tmp_path):
    path = tmp_path / "model.npz"
    np.savez(path, **{META_KEY: np.array('{"format_version": 2}')})
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)
    assert exc_info.value.errors == [
        IsPartialDict(type="version_mismatch", loc=("checkpoint", "format_version"), input=2)
    ]


def test_checkpoint_missing_parameter(tmp_path, toy_corpus):
    checkpoint = Checkpoint.snapshot(toy_model(toy_corpus), small_config(), 1, 2.0)
    del checkpoint.arrays["dec.b_o"]
    path = tmp_path / "model.npz"
    save_checkpoint(checkpoint, path)
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)
    assert exc_info.value.errors == [
        {
            "type": "missing",
            "loc": ("checkpoint", str(path), "params", "dec.b_o"),
            "msg": "parameter dec.b_o missing",
            "input": None,
        }
    ]


def test_checkpoint_misshapen_parameter(tmp_path, toy_corpus):
    checkpoint = Checkpoint.snapshot(toy_model(toy_corpus), small_config(), 1, 2.0)
    checkpoint.arrays["dec.b_o"] = np.zeros(2)
    path = tmp_path / "model.npz"
    save_checkpoint(checkpoint, path)
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)
    assert exc_info.value.errors == [
        IsPartialDict(type="shape_mismatch", loc=("checkpoint", str(path), "params", "dec.b_o"), input=[2])
    ]


def test_clip_gradients():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == 5.0
    assert grads["a"] == pytest.approx([0.6, 0.0])
    assert grads["b"] == pytest.approx([0.8])


def test_no_clipping_below_threshold():
    grads = {"a": np.array([0.3, 0.4])}
    assert clip_gradients(grads, 5.0) == pytest.approx(0.5)
    assert grads["a"] == pytest.approx([0.3, 0.4])


def test_sgd_step():
    params = small_params("vanilla")
    before = params["dec.b_o"].data.copy()
    grads = {"dec.b_o": np.ones(8)}
    sgd_step(params, grads, 0.5)
    assert params["dec.b_o"].data == pytest.approx(before - 0.5)
    assert grads == {}


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_small_step_lowers_the_loss(toy_corpus, mode):
    model = toy_model(toy_corpus, mode=mode)
    pair = toy_corpus.bitext[0]
    before, grads = sentence_gradients(model, pair)
    sgd_step(model.params, grads, 1e-4)
    assert model.loss(pair).item() < before


def test_zero_learning_rate_keeps_parameters(toy_corpus):
    model = toy_model(toy_corpus)
    before = model.params.arrays()
    result = train(toy_corpus.bitext, toy_corpus.bitext, small_config(lr=0.0), model=model)
    for name, array in before.items():
        assert np.array_equal(model.params[name].data, array)
        assert np.array_equal(result.best.arrays[name], array)
    assert result.history[0].dev_perplexity == result.history[1].dev_perplexity


def test_sgd_step_refuses_non_finite_gradients():
    params = small_params("vanilla")
    before = params["dec.b_o"].data.copy()
    grads = {"dec.b_o": np.full(8, np.nan)}
    with pytest.raises(NumericError) as exc_info:
        sgd_step(params, grads, 0.5)
    assert exc_info.value.errors == [IsPartialDict(type="non_finite_gradient", loc=("sgd_step",))]
    assert np.array_equal(params["dec.b_o"].data, before)


def test_training_failure_names_the_batch(toy_corpus):
    model = toy_model(toy_corpus, mode="vanilla")
    model.params["enc.E_x"].data[...] = np.nan
    with pytest.raises(NumericError) as exc_info:
        train(toy_corpus.bitext, toy_corpus.bitext, small_config(mode="vanilla"), model=model)
    error = exc_info.value.errors[0]
    assert error["type"] == "non_finite"
    assert error["loc"][:3] == ("train", "epoch 1", "batch 0")


def test_forest_mode_needs_forests():
    plain = Bitext([SentencePair(("a", "b"), ("x",), line=1)])
    with pytest.raises(ConfigError) as exc_info:
        train(plain, plain, small_config())
    assert exc_info.value.errors == [
        IsPartialDict(type="missing", loc=("bitext", "train")),
        IsPartialDict(type="missing", loc=("bitext", "dev")),
    ]


def test_empty_dev_split(toy_corpus):
    with pytest.raises(DataError) as exc_info:
        train(toy_corpus.bitext, Bitext([], "dev"), small_config())
    assert exc_info.value.errors == [IsPartialDict(type="empty_split", loc=("bitext", "dev"))]


def test_training_history(toy_corpus):
    seen = []
    result = train(
        toy_corpus.bitext,
        toy_corpus.bitext,
        small_config(max_epochs=3, lr=0.5),
        on_epoch=lambda metrics, model: seen.append(metrics.epoch),
    )
    assert seen == [1, 2, 3]
    assert [m.epoch for m in result.history] == [1, 2, 3]
    assert all(m.dev_perplexity >= 1.0 for m in result.history)
    best = min(result.history, key=lambda m: m.dev_perplexity)
    assert result.best.epoch == best.epoch
    assert perplexity(result.best_model(), toy_corpus.bitext) == pytest.approx(best.dev_perplexity, rel=1e-12)
    first = result.history[0]
    assert first.csv_row() == ["1", repr(first.train_loss), repr(first.dev_perplexity), "0.5"]


def test_learning_rate_decays_without_improvement(toy_corpus, monkeypatch):
    scores = iter([5.0, 6.0, 4.0, 7.0])
    monkeypatch.setattr(sys.modules["forest_nmt.train"], "perplexity", lambda model, split: next(scores))
    result = train(toy_corpus.bitext, toy_corpus.bitext, small_config(max_epochs=4, lr=0.4, lr_decay=0.5))
    assert [m.lr for m in result.history] == [0.4, 0.4, 0.2, 0.2]
    assert result.best.epoch == 3
    assert result.best.dev_perplexity == 4.0


def test_patience_stops_training(toy_corpus):
    result = train(toy_corpus.bitext, toy_corpus.bitext, small_config(max_epochs=10, lr=0.0, patience=2))
    assert len(result.history) == 3
    assert result.stopped_early


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_training_is_deterministic(toy_corpus, mode):
    config = small_config(mode=mode, seed=7)
    first = train(toy_corpus.bitext, toy_corpus.bitext, config)
    second = train(toy_corpus.bitext, toy_corpus.bitext, config)
    assert [m.csv_row() for m in first.history] == [m.csv_row() for m in second.history]
    for name, array in first.best.arrays.items():
        assert np.array_equal(array, second.best.arrays[name])


def test_threads_do_not_change_results(toy_corpus):
    single = train(toy_corpus.bitext, toy_corpus.bitext, small_config())
    pooled = train(toy_corpus.bitext, toy_corpus.bitext, small_config(threads=3))
    assert [m.csv_row() for m in single.history] == [m.csv_row() for m in pooled.history]


@pytest.mark.slow
def test_forest_model_memorizes_toy_corpus(toy_corpus):
    config = TrainConfig.build(
        mode="forest",
        hidden=16,
        embed=16,
        lr=0.1,
        batch_size=1,
        max_epochs=300,
        patience=None,
        min_freq=1,
        lr_decay=1.0,
        init_scale=0.1,
    )
    result = train(toy_corpus.bitext, toy_corpus.bitext, config)
    model = result.best_model()
    assert result.best.dev_perplexity < 1.5
    exact = sum(list(model.translate(pair)[0]) == list(pair.target) for pair in toy_corpus.bitext)
    assert exact >= 30


def test_load_arrays_checks_names_and_shapes():
    params = small_params("vanilla")
    arrays = params.arrays()
    arrays["dec.b_o"] = np.zeros(5)
    del arrays["enc.E_x"]
    arrays["dec.extra"] = np.zeros(2)
    with pytest.raises(DimensionError) as exc_info:
        params.load_arrays(arrays)
    assert exc_info.value.errors == [
        IsPartialDict(type="missing", loc=("params", "enc.E_x")),
        IsPartialDict(type="extra_forbidden", loc=("params", "dec.extra")),
        IsPartialDict(type="shape_mismatch", loc=("params", "dec.b_o"), input=[5]),
    ]


def test_load_arrays_copies_values():
    params = small_params("vanilla")
    source = small_params("vanilla", seed=9).arrays()
    params.load_arrays(source)
    assert all(np.array_equal(params[name].data, array) for name, array in source.items())
