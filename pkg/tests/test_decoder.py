import math

import numpy as np
import pytest
from dirty_equals import IsPartialDict

from forest_nmt.corpus import BOS_ID, EOS_ID, PAD_ID
from forest_nmt.decoder import (
    AttentionRecord,
    attention_context,
    build_memory,
    decode_step,
    default_max_len,
    greedy_decode,
    init_state,
    initial_decoder_state,
    sentence_loss,
    step_log_probs,
)
from forest_nmt.encoder import encode_source
from forest_nmt.exceptions import ContractError
from forest_nmt.forest import forest_from_tree, parse_bracketed, parse_forest
from forest_nmt.numcore import constant, grad_check, stable_softmax
from tests.conftest import TOY_FOREST, small_params, zero_params

WORDS = [4, 5, 6]
TARGET = [4, 5, EOS_ID]


def structure_for(mode):
    if mode == "vanilla":
        return None
    if mode == "tree":
        return parse_bracketed("((a b) c)")[0]
    return parse_forest(TOY_FOREST)


def encoded_for(mode, params, words=WORDS):
    return encode_source(words, structure_for(mode), params, mode)


def test_vanilla_init_is_last_word_state():
    params = small_params("vanilla")
    encoded = encoded_for("vanilla", params)
    assert init_state(encoded, params) is encoded.final_word_state.h


def test_zero_g_tree_init():
    params = small_params("tree", seed=6)
    for name in params:
        if name.startswith("dec.g_tree."):
            params[name].data[...] = 0.0
    encoded = encoded_for("tree", params)
    expected = 0.5 * np.tanh(0.5 * (encoded.final_word_state.c.data + encoded.root_state.c.data))
    assert np.max(np.abs(init_state(encoded, params).data - expected)) < 1e-12


def test_tree_and_forest_init_shapes_agree():
    params = small_params("forest")
    tree = parse_bracketed("((a b) c)")[0]
    as_tree = encode_source(WORDS, tree, params, "tree")
    as_forest = encode_source(WORDS, forest_from_tree(tree), params, "forest")
    assert init_state(as_tree, params).shape == init_state(as_forest, params).shape == (4,)


def test_missing_root_state():
    params = small_params("forest")
    encoded = encoded_for("forest", params)
    encoded.root_state = None
    with pytest.raises(ContractError) as exc_info:
        init_state(encoded, params)
    assert exc_info.value.errors == [IsPartialDict(type="missing_root")]


@pytest.mark.parametrize("mode,expected_size", [("vanilla", 3), ("tree", 5), ("forest", 6)])
def test_uniform_attention_without_scores(mode, expected_size):
    params = small_params(mode)
    params["dec.v"].data[...] = 0.0
    encoded = encoded_for(mode, params)
    _, weights = attention_context(constant(np.ones(4)), build_memory(encoded, params), params)
    assert weights.shape == (expected_size,)
    assert weights.data == pytest.approx(np.full(expected_size, 1.0 / expected_size), abs=1e-15)


def test_single_word_attention():
    params = small_params("vanilla")
    encoded = encoded_for("vanilla", params, words=[7])
    context, weights = attention_context(constant(np.ones(4)), build_memory(encoded, params), params)
    assert weights.data == pytest.approx([1.0])
    assert np.max(np.abs(context.data - encoded.word_states[0].h.data)) < 1e-15


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_attention_matches_straight_line_oracle(mode):
    params = small_params(mode, seed=8)
    encoded = encoded_for(mode, params)
    g = np.linspace(-0.5, 0.5, 4)
    context, weights = attention_context(constant(g), build_memory(encoded, params), params)

    states = [s.h.data for s in encoded.word_states]
    if mode != "vanilla":
        states += [s.h.data for s in encoded.phrase_states]
    scores = np.array(
        [params["dec.v"].data @ np.tanh(params["dec.W_ae"].data @ s + params["dec.W_ag"].data @ g) for s in states]
    )
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    assert np.max(np.abs(weights.data - alpha)) < 1e-12
    assert np.max(np.abs(context.data - sum(a * s for a, s in zip(alpha, states)))) < 1e-12


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_step_distribution_is_normalized(mode):
    params = small_params(mode, seed=1)
    encoded = encoded_for(mode, params)
    step = decode_step(initial_decoder_state(encoded, params), build_memory(encoded, params), params)
    assert step.distribution.sum() == pytest.approx(1.0, abs=1e-12)
    assert step.weights.data.sum() == pytest.approx(1.0, abs=1e-12)


def test_bias_only_model_ignores_inputs():
    params = zero_params("forest")
    params["dec.b_o"].data[...] = np.arange(8, dtype=float) / 4.0
    expected = stable_softmax(params["dec.b_o"].data)
    for words in ([4, 5, 6], [8, 1, 2]):
        encoded = encode_source(words, parse_forest(TOY_FOREST), params, "forest")
        step = decode_step(initial_decoder_state(encoded, params), build_memory(encoded, params), params)
        assert step.distribution == pytest.approx(expected, abs=1e-15)


def test_uniform_model_eos_loss():
    params = zero_params("vanilla")
    loss = sentence_loss(encoded_for("vanilla", params), [EOS_ID], params)
    assert loss.item() == pytest.approx(math.log(8), abs=1e-12)


def test_loss_matches_step_log_probs():
    params = small_params("forest", seed=2)
    encoded = encoded_for("forest", params)
    assert sentence_loss(encoded, TARGET, params).item() == pytest.approx(
        -sum(step_log_probs(encoded, TARGET, params)), abs=1e-12
    )


def test_loss_is_sensitive_to_phrase_probabilities():
    params = small_params("forest", seed=3)
    swapped = TOY_FOREST.replace("edge 5 0.6", "edge 5 0.3").replace("edge 5 0.4", "edge 5 0.7")
    first = sentence_loss(encode_source(WORDS, parse_forest(TOY_FOREST), params, "forest"), TARGET, params)
    second = sentence_loss(encode_source(WORDS, parse_forest(swapped), params, "forest"), TARGET, params)
    assert first.item() != pytest.approx(second.item(), abs=1e-12)


@pytest.mark.parametrize(
    "title,target,expected",
    [
        ("empty target", [], [IsPartialDict(type="empty_target", loc=("target",))]),
        ("no EOS", [4, 5], [IsPartialDict(type="missing_eos", loc=("target", 1), input=5)]),
        (
            "unknown id",
            [4, 99, EOS_ID],
            [
                {
                    "type": "token_out_of_range",
                    "loc": ("target", 1),
                    "msg": "token id 99 outside target vocabulary of size 8",
                    "input": 99,
                }
            ],
        ),
    ],
)
def test_target_contract(title, target, expected):
    params = small_params("vanilla")
    with pytest.raises(ContractError) as exc_info:
        sentence_loss(encoded_for("vanilla", params), target, params)
    assert exc_info.value.errors == expected


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_teacher_forced_loss_gradients(mode):
    params = small_params(mode, seed=4)
    structure = structure_for(mode)

    def loss(p):
        return sentence_loss(encode_source(WORDS, structure, p, mode), TARGET, p)

    report = grad_check(loss, params, max_entries=5, seed=1)
    assert report.passed, report


def test_greedy_stops_at_eos():
    params = zero_params("tree")
    params["dec.b_o"].data[EOS_ID] = 1.0
    tokens, record = greedy_decode(encoded_for("tree", params), params)
    assert tokens == []
    assert record.steps == 1
    assert not record.truncated


def test_greedy_truncates_at_default_length():
    params = zero_params("forest")
    params["dec.b_o"].data[5] = 1.0
    tokens, record = greedy_decode(encoded_for("forest", params), params)
    assert default_max_len(3) == 11
    assert tokens == [5] * 11
    assert record.steps == 11
    assert record.truncated


def test_greedy_ties_pick_lowest_id():
    params = zero_params("vanilla")
    params["dec.b_o"].data[[4, 6]] = 1.0
    tokens, record = greedy_decode(encoded_for("vanilla", params), params, max_len=3)
    assert tokens == [4, 4, 4]
    assert record.truncated


def test_greedy_never_emits_reserved_tokens():
    params = zero_params("vanilla")
    tokens, record = greedy_decode(encoded_for("vanilla", params), params, max_len=4)
    assert tokens == []
    assert record.steps == 1
    assert not record.truncated


def test_greedy_skips_pad_and_bos():
    params = zero_params("vanilla")
    params["dec.b_o"].data[[PAD_ID, BOS_ID]] = 5.0
    params["dec.b_o"].data[6] = 1.0
    tokens, record = greedy_decode(encoded_for("vanilla", params), params, max_len=3)
    assert tokens == [6, 6, 6]
    assert record.truncated


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_attention_record_accounting(mode):
    params = small_params(mode, seed=5)
    encoded = encoded_for(mode, params)
    _, record = greedy_decode(encoded, params, max_len=6)
    assert record.n_words == 3
    assert record.n_phrases == {"vanilla": 0, "tree": 2, "forest": 3}[mode]
    for words, phrases in zip(record.word_weights, record.phrase_weights):
        assert len(words) == 3
        assert len(phrases) == record.n_phrases
        assert all(w >= 0.0 for w in words + phrases)
        assert sum(words) + sum(phrases) == pytest.approx(1.0, abs=1e-9)
    again = AttentionRecord.model_validate_json(record.model_dump_json())
    assert again == record


def test_max_len_must_be_positive():
    params = small_params("vanilla")
    with pytest.raises(ContractError):
        greedy_decode(encoded_for("vanilla", params), params, max_len=0)
