"""Attentional decoder with input feeding.

The recurrence, readout and output layers are::

    g_j = tanh(W_gh g_{j-1} + W_gi E_y[y_{j-1}] + W_ga c_j + W_gu u_{j-1})
    u_j = tanh(W_uc c_j + W_ui E_y[y_{j-1}] + g_j)
    p(y_j | ...) = softmax(W_ou u_j + b_o)

where ``c_j`` attends over the word states and, outside vanilla mode, the
phrase states, with one softmax over the concatenated scores.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from forest_nmt.corpus import BOS_ID, EOS_ID, PAD_ID
from forest_nmt.encoder import EncodedSource, Mode, Params, Shapes, tree_cell_shapes, tree_lstm_combine
from forest_nmt.exceptions import ContractError, ErrorList, error_detail
from forest_nmt.numcore import (
    Tensor,
    add,
    add_n,
    cross_entropy,
    embedding,
    matmul,
    no_grad,
    softmax,
    stable_softmax,
    stack,
    tanh,
    transpose,
    zeros,
)

logger = logging.getLogger(__name__)

UNDECODABLE = (PAD_ID, BOS_ID)


def decoder_param_shapes(mode: Mode, vocab_size: int, embed: int, hidden: int) -> Shapes:
    shapes: Shapes = {
        "dec.E_y": (vocab_size, embed),
        "dec.W_gh": (hidden, hidden),
        "dec.W_gi": (hidden, embed),
        "dec.W_ga": (hidden, hidden),
        "dec.W_gu": (hidden, hidden),
        "dec.W_uc": (hidden, hidden),
        "dec.W_ui": (hidden, embed),
        "dec.W_ou": (vocab_size, hidden),
        "dec.b_o": (vocab_size,),
        "dec.v": (hidden,),
        "dec.W_ae": (hidden, hidden),
        "dec.W_ag": (hidden, hidden),
    }
    if mode != "vanilla":
        shapes.update(tree_cell_shapes("dec.g_tree", hidden))
    return shapes


class AttentionRecord(BaseModel):
    mode: str
    n_words: int
    n_phrases: int = 0
    word_weights: List[List[float]] = []
    phrase_weights: List[List[float]] = []
    truncated: bool = False

    @property
    def steps(self) -> int:
        return len(self.word_weights)

    def append(self, weights: np.ndarray) -> None:
        self.word_weights.append([float(w) for w in weights[: self.n_words]])
        self.phrase_weights.append([float(w) for w in weights[self.n_words :]])

    def word_mass(self) -> float:
        return float(sum(sum(row) for row in self.word_weights))

    def phrase_mass(self) -> float:
        return float(sum(sum(row) for row in self.phrase_weights))


@dataclass
class AttentionMemory:
    states: Tensor
    keys: Tensor
    n_words: int
    n_phrases: int

    @property
    def size(self) -> int:
        return self.n_words + self.n_phrases


def build_memory(encoded: EncodedSource, params: Params) -> AttentionMemory:
    if not encoded.word_states:
        raise ContractError.single("empty_source", "nothing to attend over", loc=("build_memory",))
    vectors = [state.h for state in encoded.word_states]
    n_phrases = 0
    if encoded.mode != "vanilla":
        vectors.extend(state.h for state in encoded.phrase_states)
        n_phrases = len(encoded.phrase_states)
    states = stack(vectors)
    keys = matmul(states, transpose(params["dec.W_ae"]))
    return AttentionMemory(states, keys, encoded.n_words, n_phrases)


def attention_context(
    g_prev: Tensor, memory: AttentionMemory, params: Params
) -> Tuple[Tensor, Tensor]:
    """Context vector and attention weights for decoder state ``g_prev``.

    ``a_i = v . tanh(W_ae s_i + W_ag g_prev)`` for every word and phrase state.
    """
    query = matmul(params["dec.W_ag"], g_prev)
    scores = matmul(tanh(add(memory.keys, query)), params["dec.v"])
    weights = softmax(scores)
    return matmul(weights, memory.states), weights


def init_state(encoded: EncodedSource, params: Params) -> Tensor:
    final = encoded.final_word_state
    if encoded.mode == "vanilla":
        return final.h
    if encoded.root_state is None:
        raise ContractError.single(
            "missing_root",
            f"{encoded.mode} mode needs the root phrase state",
            loc=("init_state",),
        )
    return tree_lstm_combine(final, encoded.root_state, params, prefix="dec.g_tree").h


class DecoderState(NamedTuple):
    g: Tensor
    u: Tensor
    y: int


class StepResult(NamedTuple):
    g: Tensor
    u: Tensor
    logits: Tensor
    weights: Tensor

    @property
    def distribution(self) -> np.ndarray:
        return stable_softmax(self.logits.data)


def initial_decoder_state(encoded: EncodedSource, params: Params) -> DecoderState:
    g = init_state(encoded, params)
    return DecoderState(g, zeros(g.shape[0]), BOS_ID)


def decode_step(prev: DecoderState, memory: AttentionMemory, params: Params) -> StepResult:
    vocab_size = params["dec.E_y"].shape[0]
    if not 0 <= prev.y < vocab_size:
        raise ContractError.single(
            "token_out_of_range",
            f"token id {prev.y} outside target vocabulary of size {vocab_size}",
            loc=("decode_step",),
            input=prev.y,
        )
    context, weights = attention_context(prev.g, memory, params)
    y_emb = embedding(params["dec.E_y"], prev.y)
    g = tanh(
        add_n(
            [
                matmul(params["dec.W_gh"], prev.g),
                matmul(params["dec.W_gi"], y_emb),
                matmul(params["dec.W_ga"], context),
                matmul(params["dec.W_gu"], prev.u),
            ]
        )
    )
    # g_j enters the readout without a projection
    u = tanh(add_n([matmul(params["dec.W_uc"], context), matmul(params["dec.W_ui"], y_emb), g]))
    logits = add(matmul(params["dec.W_ou"], u), params["dec.b_o"])
    return StepResult(g, u, logits, weights)


def _check_target(target: Sequence[int], vocab_size: int) -> None:
    errors: ErrorList = []
    if not target:
        errors.append(error_detail("empty_target", "target is empty", loc=("target",), input=[]))
    elif target[-1] != EOS_ID:
        errors.append(
            error_detail("missing_eos", "target must end with EOS", loc=("target", len(target) - 1), input=target[-1])
        )
    for position, token in enumerate(target):
        if not 0 <= token < vocab_size:
            errors.append(
                error_detail(
                    "token_out_of_range",
                    f"token id {token} outside target vocabulary of size {vocab_size}",
                    loc=("target", position),
                    input=token,
                )
            )
    if errors:
        raise ContractError(errors)


def sentence_loss(encoded: EncodedSource, target: Sequence[int], params: Params) -> Tensor:
    _check_target(target, params["dec.E_y"].shape[0])
    memory = build_memory(encoded, params)
    state = initial_decoder_state(encoded, params)
    losses = []
    for token in target:
        step = decode_step(state, memory, params)
        losses.append(cross_entropy(step.logits, token))
        state = DecoderState(step.g, step.u, token)
    return add_n(losses)


def step_log_probs(encoded: EncodedSource, target: Sequence[int], params: Params) -> List[float]:
    _check_target(target, params["dec.E_y"].shape[0])
    with no_grad():
        memory = build_memory(encoded, params)
        state = initial_decoder_state(encoded, params)
        result = []
        for token in target:
            step = decode_step(state, memory, params)
            result.append(float(np.log(step.distribution[token])))
            state = DecoderState(step.g, step.u, token)
    return result


def default_max_len(n_words: int) -> int:
    return 2 * n_words + 5


def greedy_decode(
    encoded: EncodedSource, params: Params, max_len: Optional[int] = None
) -> Tuple[List[int], AttentionRecord]:
    """Argmax over every id except PAD and BOS; ties go to the lowest id.

    Stops at EOS or after ``max_len`` steps (``2n + 5`` by default). Every
    step, including the one that emits EOS, is recorded.
    """
    if max_len is None:
        max_len = default_max_len(encoded.n_words)
    if max_len < 1:
        raise ContractError.single(
            "max_len", f"max_len must be at least 1, got {max_len}", loc=("greedy_decode",), input=max_len
        )
    record = AttentionRecord(
        mode=encoded.mode,
        n_words=encoded.n_words,
        n_phrases=len(encoded.phrase_states) if encoded.mode != "vanilla" else 0,
    )
    tokens: List[int] = []
    with no_grad():
        memory = build_memory(encoded, params)
        state = initial_decoder_state(encoded, params)
        finished = False
        for _ in range(max_len):
            step = decode_step(state, memory, params)
            record.append(step.weights.data)
            logits = step.logits.data.copy()
            logits[list(UNDECODABLE)] = -np.inf
            token = int(np.argmax(logits))
            if token == EOS_ID:
                finished = True
                break
            tokens.append(token)
            state = DecoderState(step.g, step.u, token)
    if not finished:
        record.truncated = True
        logger.debug("greedy decode truncated after %d steps", max_len)
    return tokens, record
