"""Source encoders: sequential LSTM, binary tree-LSTM and forest-LSTM.

Parameters are looked up by name in a ``Mapping[str, Tensor]`` (normally a
:class:`forest_nmt.model.ModelParams`). Every state is an ``(h, c)`` pair.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from forest_nmt.exceptions import ContractError
from forest_nmt.forest import PackedForest, Hyperedge, SpanTree, Span, forest_from_tree, topo_order
from forest_nmt.numcore import (
    Tensor,
    add_n,
    concat,
    embedding,
    matmul,
    scale,
    sigmoid,
    tanh,
    zeros,
)

Mode = Literal["vanilla", "tree", "forest"]
MODES: Tuple[Mode, ...] = ("vanilla", "tree", "forest")
Params = Mapping[str, Tensor]
Shapes = Dict[str, Tuple[int, ...]]

SEQ_GATES = ("i", "f", "o", "c")
TREE_GATES = ("i", "f_l", "f_r", "o", "c")
FOREST_GATES = ("i", "o", "c")

PROB_SUM_TOLERANCE = 1e-9


class CellState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class EncodedSource:
    mode: Mode
    word_states: List[CellState]
    phrase_states: List[CellState] = field(default_factory=list)
    phrase_spans: List[Span] = field(default_factory=list)
    root_state: Optional[CellState] = None

    @property
    def n_words(self) -> int:
        return len(self.word_states)

    @property
    def final_word_state(self) -> CellState:
        return self.word_states[-1]

    @property
    def num_attendable(self) -> int:
        if self.mode == "vanilla":
            return self.n_words
        return self.n_words + len(self.phrase_states)


def sequential_shapes(vocab_size: int, embed: int, hidden: int) -> Shapes:
    shapes: Shapes = {"enc.E_x": (vocab_size, embed)}
    for gate in SEQ_GATES:
        shapes[f"enc.seq.W_{gate}"] = (hidden, embed)
        shapes[f"enc.seq.U_{gate}"] = (hidden, hidden)
        shapes[f"enc.seq.b_{gate}"] = (hidden,)
    return shapes


def tree_cell_shapes(prefix: str, hidden: int) -> Shapes:
    shapes: Shapes = {}
    for gate in TREE_GATES:
        shapes[f"{prefix}.U_l_{gate}"] = (hidden, hidden)
        shapes[f"{prefix}.U_r_{gate}"] = (hidden, hidden)
        shapes[f"{prefix}.b_{gate}"] = (hidden,)
    return shapes


def forest_cell_shapes(prefix: str, hidden: int) -> Shapes:
    shapes: Shapes = {
        f"{prefix}.U_gamma": (hidden, hidden),
        f"{prefix}.W_gamma": (hidden, hidden),
        f"{prefix}.v_gamma": (hidden,),
        f"{prefix}.b_gamma": (hidden,),
        f"{prefix}.U_f": (hidden, 2 * hidden),
        f"{prefix}.W_f": (hidden, 2 * hidden),
        f"{prefix}.b_f": (hidden,),
    }
    for gate in FOREST_GATES:
        shapes[f"{prefix}.U_{gate}"] = (hidden, 2 * hidden)
        shapes[f"{prefix}.b_{gate}"] = (hidden,)
    return shapes


def encoder_param_shapes(mode: Mode, vocab_size: int, embed: int, hidden: int) -> Shapes:
    shapes = sequential_shapes(vocab_size, embed, hidden)
    if mode in ("tree", "forest"):
        shapes.update(tree_cell_shapes("enc.tree", hidden))
    if mode == "forest":
        shapes.update(forest_cell_shapes("enc.forest", hidden))
    return shapes


def hidden_size(params: Params) -> int:
    return params["enc.seq.U_i"].shape[0]


def encode_sequence(words: Sequence[int], params: Params) -> List[CellState]:
    if not words:
        raise ContractError.single(
            "empty_sentence", "cannot encode an empty sentence", loc=("encode_sequence",)
        )
    table = params["enc.E_x"]
    size = hidden_size(params)
    h, c = zeros(size), zeros(size)
    states: List[CellState] = []
    for word in words:
        x = embedding(table, word)

        def gate(name: str) -> Tensor:
            return add_n(
                [
                    matmul(params[f"enc.seq.W_{name}"], x),
                    matmul(params[f"enc.seq.U_{name}"], h),
                    params[f"enc.seq.b_{name}"],
                ]
            )

        i, f, o = sigmoid(gate("i")), sigmoid(gate("f")), sigmoid(gate("o"))
        c = add_n([i * tanh(gate("c")), f * c])
        h = o * tanh(c)
        states.append(CellState(h, c))
    return states


def tree_lstm_combine(
    left: CellState, right: CellState, params: Params, prefix: str = "enc.tree"
) -> CellState:
    if left.h.shape != right.h.shape:
        raise ContractError.single(
            "shape_mismatch",
            f"children differ in size: {left.h.shape} vs {right.h.shape}",
            loc=("tree_lstm_combine",),
        )

    def gate(name: str) -> Tensor:
        return add_n(
            [
                matmul(params[f"{prefix}.U_l_{name}"], left.h),
                matmul(params[f"{prefix}.U_r_{name}"], right.h),
                params[f"{prefix}.b_{name}"],
            ]
        )

    i = sigmoid(gate("i"))
    f_l = sigmoid(gate("f_l"))
    f_r = sigmoid(gate("f_r"))
    o = sigmoid(gate("o"))
    c_tilde = tanh(gate("c"))
    c = add_n([i * c_tilde, f_l * left.c, f_r * right.c])
    return CellState(o * tanh(c), c)


def _zero_state(size: int) -> CellState:
    return CellState(zeros(size), zeros(size))


def derive_edge_embedding(
    edge: Hyperedge,
    child_states: Mapping[int, CellState],
    params: Params,
    prefix: str = "enc.tree",
) -> CellState:
    """Tree-LSTM embedding of one derivation of ``edge.head``.

    Unary edges combine with a zero right child; edges with more than two
    tails are folded left to right.
    """
    tails = [child_states[tail] for tail in edge.tails]
    if len(tails) == 1:
        return tree_lstm_combine(tails[0], _zero_state(tails[0].h.shape[0]), params, prefix)
    state = tree_lstm_combine(tails[0], tails[1], params, prefix)
    for tail in tails[2:]:
        state = tree_lstm_combine(state, tail, params, prefix)
    return state


def _sum_or_zero(parts: Sequence[Tensor], size: int) -> Tensor:
    return add_n(parts) if parts else zeros(size)


def forest_lstm_fuse(
    children: Sequence[Tuple[CellState, float]],
    params: Params,
    prefix: str = "enc.forest",
) -> CellState:
    """Fuse the alternative derivations of one phrase into a unified state.

    Each child contributes its tree-LSTM state and its normalized hyperedge
    probability. The gamma layer and the per-child forget gate see the child
    itself through ``W`` and the sum over the other children through ``U``.
    """
    if not children:
        raise ContractError.single(
            "no_children", "forest_lstm_fuse needs at least one derivation", loc=("forest_lstm_fuse",)
        )
    total = sum(prob for _, prob in children)
    if abs(total - 1.0) > PROB_SUM_TOLERANCE:
        raise ContractError.single(
            "probability_sum",
            f"derivation probabilities sum to {total!r}, expected 1",
            loc=("forest_lstm_fuse",),
            input=[prob for _, prob in children],
        )
    size = children[0][0].h.shape[0]
    hs = [state.h for state, _ in children]

    gammas = []
    for index, (state, prob) in enumerate(children):
        others = _sum_or_zero([h for j, h in enumerate(hs) if j != index], size)
        gammas.append(
            tanh(
                add_n(
                    [
                        matmul(params[f"{prefix}.U_gamma"], others),
                        matmul(params[f"{prefix}.W_gamma"], state.h),
                        scale(params[f"{prefix}.v_gamma"], prob),
                        params[f"{prefix}.b_gamma"],
                    ]
                )
            )
        )
    joined = [concat([h, gamma]) for h, gamma in zip(hs, gammas)]
    pooled = add_n(joined)

    def gate(name: str) -> Tensor:
        return add_n([matmul(params[f"{prefix}.U_{name}"], pooled), params[f"{prefix}.b_{name}"]])

    i = sigmoid(gate("i"))
    o = sigmoid(gate("o"))
    c_tilde = tanh(gate("c"))
    memory = [i * c_tilde]
    for index, (state, _) in enumerate(children):
        others = _sum_or_zero([x for j, x in enumerate(joined) if j != index], 2 * size)
        f = sigmoid(
            add_n(
                [
                    matmul(params[f"{prefix}.U_f"], others),
                    matmul(params[f"{prefix}.W_f"], joined[index]),
                    params[f"{prefix}.b_f"],
                ]
            )
        )
        memory.append(f * state.c)
    c = add_n(memory)
    return CellState(o * tanh(c), c)


def _check_length(words: Sequence[int], sentence_len: int, where: str) -> None:
    if len(words) != sentence_len:
        raise ContractError.single(
            "length_mismatch",
            f"structure covers {sentence_len} words, sentence has {len(words)}",
            loc=(where,),
            input=len(words),
        )


def encode_forest(words: Sequence[int], forest: PackedForest, params: Params) -> EncodedSource:
    _check_length(words, forest.sentence_len, "encode_forest")
    word_states = encode_sequence(words, params)
    states: Dict[int, CellState] = {}
    encoded = EncodedSource("forest", word_states)
    for node_id in topo_order(forest):
        node = forest.node(node_id)
        if node.is_leaf:
            states[node_id] = word_states[node.start]
            continue
        derivations = [
            (derive_edge_embedding(edge, states, params), edge.prob)
            for edge in forest.incoming(node_id)
        ]
        states[node_id] = forest_lstm_fuse(derivations, params)
        encoded.phrase_states.append(states[node_id])
        encoded.phrase_spans.append(node.span)
    encoded.root_state = states[forest.root]
    return encoded


def encode_tree(words: Sequence[int], tree: SpanTree, params: Params) -> EncodedSource:
    if not tree.is_binary():
        raise ContractError.single(
            "non_binary_tree",
            "the tree encoder needs a binary tree",
            loc=("encode_tree",),
        )
    _check_length(words, tree.span[1], "encode_tree")
    forest = forest_from_tree(tree, len(words))
    word_states = encode_sequence(words, params)
    states: Dict[int, CellState] = {}
    encoded = EncodedSource("tree", word_states)
    for node_id in topo_order(forest):
        node = forest.node(node_id)
        if node.is_leaf:
            states[node_id] = word_states[node.start]
            continue
        (edge,) = forest.incoming(node_id)
        left, right = (states[tail] for tail in edge.tails)
        states[node_id] = tree_lstm_combine(left, right, params)
        encoded.phrase_states.append(states[node_id])
        encoded.phrase_spans.append(node.span)
    encoded.root_state = states[forest.root]
    return encoded


def encode_source(
    words: Sequence[int],
    structure: Union[PackedForest, SpanTree, None],
    params: Params,
    mode: Mode,
) -> EncodedSource:
    if mode == "vanilla":
        return EncodedSource("vanilla", encode_sequence(words, params))
    if mode == "tree":
        if not isinstance(structure, SpanTree):
            raise ContractError.single(
                "missing_structure", "tree mode needs a span tree", loc=("encode_source",)
            )
        return encode_tree(words, structure, params)
    if not isinstance(structure, PackedForest):
        raise ContractError.single(
            "missing_structure", "forest mode needs a packed forest", loc=("encode_source",)
        )
    return encode_forest(words, structure, params)
