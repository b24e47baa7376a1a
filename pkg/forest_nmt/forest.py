"""Packed parse forests.

A forest is a hypergraph over spans of the source sentence. Leaves are the
words (ids ``0..k-1``, implicit in the file format), phrase nodes are
declared spans, and each hyperedge is one way of building a phrase from an
ordered list of child nodes, weighted by a rule probability.

File format, one forest per blank-line separated block::

    sent 3
    node 3 0 2
    node 4 0 3
    edge 3 1.0 0 1
    edge 4 1.0 3 2

``probs log`` switches edge probabilities to natural-log scale. Lines
starting with ``#`` are ignored.
"""

import heapq
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Literal,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

from forest_nmt.exceptions import (
    CapacityError,
    ErrorList,
    ForestFormatError,
    error_detail,
)

Span = Tuple[int, int]

PROB_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ForestNode:
    id: int
    start: int
    end: int
    kind: Literal["leaf", "phrase"]

    @property
    def span(self) -> Span:
        return (self.start, self.end)

    @property
    def width(self) -> int:
        return self.end - self.start

    @property
    def is_leaf(self) -> bool:
        return self.kind == "leaf"


@dataclass(frozen=True)
class Hyperedge:
    head: int
    tails: Tuple[int, ...]
    prob: float

    @property
    def arity(self) -> int:
        return len(self.tails)


class SpanTree(NamedTuple):
    span: Span
    children: Tuple["SpanTree", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def internal_nodes(self) -> Iterator["SpanTree"]:
        if self.children:
            for child in self.children:
                yield from child.internal_nodes()
            yield self

    def is_binary(self) -> bool:
        return all(len(node.children) == 2 for node in self.internal_nodes())


@dataclass(frozen=True)
class PackedForest:
    nodes: Tuple[ForestNode, ...]
    edges: Tuple[Hyperedge, ...]
    sentence_len: int
    root: int
    _by_id: Dict[int, ForestNode] = field(init=False, repr=False, compare=False)
    _incoming: Dict[int, Tuple[Hyperedge, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        incoming: Dict[int, List[Hyperedge]] = {node.id: [] for node in self.nodes}
        for edge in self.edges:
            incoming[edge.head].append(edge)
        object.__setattr__(self, "_by_id", {node.id: node for node in self.nodes})
        object.__setattr__(
            self, "_incoming", {node_id: tuple(edges) for node_id, edges in incoming.items()}
        )

    def node(self, node_id: int) -> ForestNode:
        return self._by_id[node_id]

    def incoming(self, node_id: int) -> Tuple[Hyperedge, ...]:
        return self._incoming[node_id]

    @cached_property
    def phrase_nodes(self) -> Tuple[ForestNode, ...]:
        return tuple(node for node in self.nodes if not node.is_leaf)

    @property
    def num_phrases(self) -> int:
        return len(self.phrase_nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._by_id


class _NodeDecl(NamedTuple):
    id: int
    start: int
    end: int
    line: Optional[int]


class _EdgeDecl(NamedTuple):
    head: int
    prob: float
    tails: Tuple[int, ...]
    line: Optional[int]


def _loc(line: Optional[int], fallback: str, index: int) -> Tuple[Any, ...]:
    return ("line", line) if line is not None else (fallback, index)


def _assemble(
    sentence_len: int,
    node_decls: Sequence[_NodeDecl],
    edge_decls: Sequence[_EdgeDecl],
    log_probs: bool,
    errors: ErrorList,
    header_loc: Tuple[Any, ...] = ("sent",),
) -> PackedForest:
    if sentence_len < 1:
        errors.append(
            error_detail(
                "empty_sentence",
                "sentence length must be at least 1",
                loc=header_loc,
                input=sentence_len,
            )
        )
        raise ForestFormatError(errors)

    nodes: Dict[int, ForestNode] = {
        i: ForestNode(i, i, i + 1, "leaf") for i in range(sentence_len)
    }
    node_lines: Dict[int, Optional[int]] = {}
    for index, decl in enumerate(node_decls):
        loc = _loc(decl.line, "node", index)
        if decl.id < sentence_len:
            errors.append(
                error_detail(
                    "reserved_id",
                    f"node id {decl.id} is reserved for leaf {decl.id}",
                    loc=loc,
                    input=decl.id,
                )
            )
            continue
        if decl.id in nodes:
            errors.append(
                error_detail("duplicate_id", f"duplicate node id {decl.id}", loc=loc, input=decl.id)
            )
            continue
        if not 0 <= decl.start < decl.end <= sentence_len:
            errors.append(
                error_detail(
                    "span_violation",
                    f"span ({decl.start}, {decl.end}) outside sentence of length {sentence_len}",
                    loc=loc,
                    input=[decl.start, decl.end],
                )
            )
            continue
        nodes[decl.id] = ForestNode(decl.id, decl.start, decl.end, "phrase")
        node_lines[decl.id] = decl.line

    edges: List[Hyperedge] = []
    edge_lines: List[Optional[int]] = []
    seen: Dict[Tuple[int, Tuple[int, ...]], Optional[int]] = {}
    for index, decl in enumerate(edge_decls):
        loc = _loc(decl.line, "edge", index)
        head = nodes.get(decl.head)
        if head is None:
            errors.append(
                error_detail("unknown_node", f"unknown head node {decl.head}", loc=loc, input=decl.head)
            )
            continue
        if head.is_leaf:
            errors.append(
                error_detail(
                    "leaf_head", f"leaf {decl.head} cannot head a hyperedge", loc=loc, input=decl.head
                )
            )
            continue
        if not decl.tails:
            errors.append(error_detail("no_tails", "hyperedge needs at least one tail", loc=loc))
            continue
        missing = [tail for tail in decl.tails if tail not in nodes]
        if missing:
            errors.append(
                error_detail(
                    "unknown_node", f"unknown tail node(s) {missing}", loc=loc, input=missing
                )
            )
            continue
        if decl.head in decl.tails:
            errors.append(
                error_detail("cycle", f"node {decl.head} derives itself", loc=loc, input=decl.head)
            )
            continue
        tails = [nodes[tail] for tail in decl.tails]
        contiguous = all(a.end == b.start for a, b in zip(tails, tails[1:]))
        if not contiguous or tails[0].start != head.start or tails[-1].end != head.end:
            errors.append(
                error_detail(
                    "span_violation",
                    f"tail spans {[t.span for t in tails]} do not tile head span {head.span}",
                    loc=loc,
                    input=[list(t.span) for t in tails],
                )
            )
            continue
        prob = decl.prob
        if not math.isfinite(prob) or (not log_probs and prob <= 0.0):
            errors.append(
                error_detail(
                    "nonpositive_probability",
                    f"hyperedge probability must be positive, got {decl.prob}",
                    loc=loc,
                    input=decl.prob,
                )
            )
            continue
        key = (decl.head, decl.tails)
        if key in seen:
            errors.append(
                error_detail(
                    "duplicate_edge",
                    f"hyperedge {decl.head} -> {list(decl.tails)} declared twice",
                    loc=loc,
                    input=list(decl.tails),
                )
            )
            continue
        seen[key] = decl.line
        edges.append(Hyperedge(decl.head, decl.tails, prob))
        edge_lines.append(decl.line)

    full_span = (0, sentence_len)
    used_as_tail = {tail for edge in edges for tail in edge.tails}
    roots = [
        node.id
        for node in nodes.values()
        if node.span == full_span and node.id not in used_as_tail
    ]
    if len(roots) != 1:
        errors.append(
            error_detail(
                "missing_root" if not roots else "multiple_roots",
                f"expected exactly one root spanning {full_span}, found {sorted(roots)}",
                loc=header_loc,
                input=sorted(roots),
            )
        )
    if errors:
        raise ForestFormatError(errors)
    root = roots[0]

    incoming: Dict[int, List[int]] = {node_id: [] for node_id in nodes}
    for position, edge in enumerate(edges):
        incoming[edge.head].append(position)

    reachable = {root}
    frontier = [root]
    while frontier:
        node_id = frontier.pop()
        for position in incoming[node_id]:
            for tail in edges[position].tails:
                if tail not in reachable:
                    reachable.add(tail)
                    frontier.append(tail)

    for node_id in sorted(reachable):
        if not nodes[node_id].is_leaf and not incoming[node_id]:
            errors.append(
                error_detail(
                    "underived_phrase",
                    f"phrase node {node_id} {nodes[node_id].span} has no incoming hyperedge",
                    loc=_loc(node_lines.get(node_id), "node", node_id),
                    input=node_id,
                )
            )
    if errors:
        raise ForestFormatError(errors)

    kept_positions = [p for p, edge in enumerate(edges) if edge.head in reachable]
    kept_nodes = tuple(nodes[node_id] for node_id in sorted(reachable))

    dependencies = {node.id: {t for p in incoming[node.id] for t in edges[p].tails} for node in kept_nodes}
    pending = {node_id: len(deps) for node_id, deps in dependencies.items()}
    dependents: Dict[int, List[int]] = {node.id: [] for node in kept_nodes}
    for node_id, deps in dependencies.items():
        for dep in deps:
            dependents[dep].append(node_id)
    ready = [node_id for node_id, count in pending.items() if count == 0]
    visited = 0
    while ready:
        node_id = ready.pop()
        visited += 1
        for dependent in dependents[node_id]:
            pending[dependent] -= 1
            if pending[dependent] == 0:
                ready.append(dependent)
    if visited != len(kept_nodes):
        stuck = sorted(node_id for node_id, count in pending.items() if count > 0)
        first = next(p for p in kept_positions if edges[p].head in stuck)
        raise ForestFormatError(
            [
                error_detail(
                    "cycle",
                    f"hyperedges form a cycle through nodes {stuck}",
                    loc=_loc(edge_lines[first], "edge", first),
                    input=stuck,
                )
            ]
        )

    return PackedForest(
        kept_nodes,
        _normalize([edges[p] for p in kept_positions], log_probs),
        sentence_len,
        root,
    )


def _normalize(edges: Sequence[Hyperedge], log_probs: bool) -> Tuple[Hyperedge, ...]:
    by_head: Dict[int, List[float]] = {}
    for edge in edges:
        by_head.setdefault(edge.head, []).append(edge.prob)
    if log_probs:
        peaks = {head: max(values) for head, values in by_head.items()}
        weights = [math.exp(edge.prob - peaks[edge.head]) for edge in edges]
    else:
        weights = [edge.prob for edge in edges]
    totals: Dict[int, float] = {}
    for edge, weight in zip(edges, weights):
        totals[edge.head] = totals.get(edge.head, 0.0) + weight
    return tuple(
        Hyperedge(edge.head, edge.tails, weight / totals[edge.head])
        for edge, weight in zip(edges, weights)
    )


def build_forest(
    sentence_len: int,
    nodes: Sequence[Tuple[int, int, int]],
    edges: Sequence[Tuple[int, float, Sequence[int]]],
    *,
    log_probs: bool = False,
) -> PackedForest:
    """Build a validated forest from ``(id, start, end)`` phrase nodes and
    ``(head, prob, tails)`` hyperedges, with parse_forest's checks."""
    node_decls = [_NodeDecl(i, s, e, None) for i, s, e in nodes]
    edge_decls = [_EdgeDecl(h, float(p), tuple(t), None) for h, p, t in edges]
    return _assemble(sentence_len, node_decls, edge_decls, log_probs, [])


def _parse_block(lines: Sequence[Tuple[int, str]]) -> PackedForest:
    errors: ErrorList = []
    sentence_len: Optional[int] = None
    header_line = lines[0][0] if lines else 1
    log_probs = False
    node_decls: List[_NodeDecl] = []
    edge_decls: List[_EdgeDecl] = []
    for number, raw in lines:
        fields = raw.split()
        keyword = fields[0]
        loc = ("line", number)
        try:
            if keyword == "sent" and len(fields) == 2:
                if sentence_len is not None:
                    raise ValueError("duplicate sent header")
                sentence_len = int(fields[1])
                header_line = number
            elif keyword == "probs" and len(fields) == 2 and fields[1] in ("log", "linear"):
                log_probs = fields[1] == "log"
            elif keyword == "node" and len(fields) == 4:
                node_decls.append(
                    _NodeDecl(int(fields[1]), int(fields[2]), int(fields[3]), number)
                )
            elif keyword == "edge" and len(fields) >= 4:
                edge_decls.append(
                    _EdgeDecl(
                        int(fields[1]),
                        float(fields[2]),
                        tuple(int(tail) for tail in fields[3:]),
                        number,
                    )
                )
            else:
                raise ValueError(f"unrecognised line {raw.strip()!r}")
        except ValueError as exc:
            errors.append(error_detail("syntax", str(exc), loc=loc, input=raw.strip()))
    if sentence_len is None:
        errors.append(
            error_detail("missing_header", "block has no 'sent <k>' line", loc=("line", header_line))
        )
        raise ForestFormatError(errors)
    return _assemble(
        sentence_len, node_decls, edge_decls, log_probs, errors, header_loc=("line", header_line)
    )


def _blocks(text: str, first_line: int = 1) -> Iterator[List[Tuple[int, str]]]:
    block: List[Tuple[int, str]] = []
    for offset, raw in enumerate(text.splitlines()):
        stripped = raw.strip()
        if stripped.startswith("#"):
            continue
        if not stripped:
            if block:
                yield block
                block = []
            continue
        block.append((first_line + offset, stripped))
    if block:
        yield block


def parse_forest(text: str) -> PackedForest:
    blocks = list(_blocks(text))
    if len(blocks) != 1:
        raise ForestFormatError(
            [
                error_detail(
                    "block_count",
                    f"expected exactly one forest block, found {len(blocks)}",
                    loc=("line", 1),
                    input=len(blocks),
                )
            ]
        )
    return _parse_block(blocks[0])


def split_forest_blocks(text: str) -> List[List[Tuple[int, str]]]:
    return list(_blocks(text))


def parse_forest_block(block: Sequence[Tuple[int, str]]) -> PackedForest:
    return _parse_block(block)


def parse_forests(text: str) -> List[PackedForest]:
    return [_parse_block(block) for block in _blocks(text)]


def format_forest(forest: PackedForest) -> str:
    lines = [f"sent {forest.sentence_len}"]
    lines.extend(
        f"node {node.id} {node.start} {node.end}" for node in forest.phrase_nodes
    )
    lines.extend(
        f"edge {edge.head} {edge.prob!r} {' '.join(str(t) for t in edge.tails)}"
        for edge in forest.edges
    )
    return "\n".join(lines) + "\n"


def topo_order(forest: PackedForest) -> List[int]:
    """Bottom-up order: every leaf first, then each phrase after all tails of its
    hyperedges, ready phrases taken by smallest ``(span width, start, id)``."""
    pending: Dict[int, int] = {}
    dependents: Dict[int, List[int]] = {node.id: [] for node in forest.nodes}
    for node in forest.nodes:
        deps = {tail for edge in forest.incoming(node.id) for tail in edge.tails}
        pending[node.id] = len(deps)
        for dep in deps:
            dependents[dep].append(node.id)

    def key(node_id: int) -> Tuple[bool, int, int, int]:
        node = forest.node(node_id)
        return (not node.is_leaf, node.width, node.start, node.id)

    heap = [key(node_id) for node_id, count in pending.items() if count == 0]
    heapq.heapify(heap)
    order: List[int] = []
    while heap:
        node_id = heapq.heappop(heap)[-1]
        order.append(node_id)
        for dependent in dependents[node_id]:
            pending[dependent] -= 1
            if pending[dependent] == 0:
                heapq.heappush(heap, key(dependent))
    return order


def tree_count(forest: PackedForest) -> int:
    counts: Dict[int, int] = {}
    for node_id in topo_order(forest):
        edges = forest.incoming(node_id)
        if not edges:
            counts[node_id] = 1
        else:
            counts[node_id] = sum(math.prod(counts[t] for t in edge.tails) for edge in edges)
    return counts[forest.root]


def enumerate_trees(forest: PackedForest, limit: float = math.inf) -> List[SpanTree]:
    total = tree_count(forest)
    if total > limit:
        raise CapacityError.single(
            "too_many_trees",
            f"forest encodes {total} trees, above the limit of {limit}",
            loc=("enumerate_trees",),
            input=total,
        )
    derivations: Dict[int, List[SpanTree]] = {}
    for node_id in topo_order(forest):
        node = forest.node(node_id)
        edges = forest.incoming(node_id)
        if not edges:
            derivations[node_id] = [SpanTree(node.span)]
            continue
        trees: List[SpanTree] = []
        for edge in edges:
            partial: List[Tuple[SpanTree, ...]] = [()]
            for tail in edge.tails:
                partial = [prefix + (child,) for prefix in partial for child in derivations[tail]]
            trees.extend(SpanTree(node.span, children) for children in partial)
        derivations[node_id] = trees
    return derivations[forest.root]


def best_tree(forest: PackedForest) -> SpanTree:
    scores: Dict[int, float] = {}
    choice: Dict[int, Hyperedge] = {}
    for node_id in topo_order(forest):
        edges = forest.incoming(node_id)
        if not edges:
            scores[node_id] = 0.0
            continue
        best: Optional[Hyperedge] = None
        best_score = -math.inf
        for edge in edges:
            score = math.log(edge.prob) + sum(scores[t] for t in edge.tails)
            if score > best_score:
                best, best_score = edge, score
        assert best is not None
        scores[node_id] = best_score
        choice[node_id] = best

    def build(node_id: int) -> SpanTree:
        node = forest.node(node_id)
        if node_id not in choice:
            return SpanTree(node.span)
        return SpanTree(node.span, tuple(build(t) for t in choice[node_id].tails))

    return build(forest.root)


def forest_from_trees(
    trees: Sequence[SpanTree],
    weights: Optional[Sequence[float]] = None,
    sentence_len: Optional[int] = None,
) -> PackedForest:
    """Pack derivations into one forest, sharing phrase nodes by span.

    An edge's probability is the total weight of the trees using it, so after
    per-head normalization heavier trees own the likelier derivations.
    """
    if not trees:
        raise ForestFormatError.single("no_trees", "need at least one tree", loc=("trees",))
    if weights is None:
        weights = [1.0] * len(trees)
    n = sentence_len if sentence_len is not None else trees[0].span[1]
    spans = sorted(
        {node.span for tree in trees for node in tree.internal_nodes()},
        key=lambda span: (span[1] - span[0], span[0]),
    )
    phrase_ids = {span: n + index for index, span in enumerate(spans)}
    edge_weights: Dict[Tuple[int, Tuple[int, ...]], float] = {}
    errors: ErrorList = []
    for tree_index, (tree, weight) in enumerate(zip(trees, weights)):
        for node in tree.internal_nodes():
            tails = []
            for child in node.children:
                if child.is_leaf:
                    if child.span[1] - child.span[0] != 1:
                        errors.append(
                            error_detail(
                                "span_violation",
                                f"word leaf {child.span} must cover exactly one word",
                                loc=("tree", tree_index),
                                input=list(child.span),
                            )
                        )
                    tails.append(child.span[0])
                else:
                    tails.append(phrase_ids[child.span])
            key = (phrase_ids[node.span], tuple(tails))
            edge_weights[key] = edge_weights.get(key, 0.0) + float(weight)
    if errors:
        raise ForestFormatError(errors)
    return _assemble(
        n,
        [_NodeDecl(phrase_ids[span], span[0], span[1], None) for span in spans],
        [_EdgeDecl(head, w, tails, None) for (head, tails), w in edge_weights.items()],
        False,
        [],
    )


def forest_from_tree(tree: SpanTree, sentence_len: Optional[int] = None) -> PackedForest:
    return forest_from_trees([tree], [1.0], sentence_len)


def _tokenize_brackets(text: str) -> List[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_bracketed(text: str) -> Tuple[SpanTree, List[str]]:
    tokens = _tokenize_brackets(text)
    words: List[str] = []
    position = 0

    def fail(msg: str, type: str = "unbalanced") -> ForestFormatError:
        return ForestFormatError.single(type, msg, loc=("token", position), input=text)

    def read() -> SpanTree:
        nonlocal position
        if position >= len(tokens):
            raise fail("unexpected end of tree")
        token = tokens[position]
        if token == ")":
            raise fail("unexpected ')'")
        if token != "(":
            position += 1
            words.append(token)
            return SpanTree((len(words) - 1, len(words)))
        position += 1
        start = len(words)
        children: List[SpanTree] = []
        while position < len(tokens) and tokens[position] != ")":
            children.append(read())
        if position >= len(tokens):
            raise fail("missing ')'")
        position += 1
        if not children:
            raise fail("empty brackets '()'", "empty_group")
        if len(children) == 1 and not children[0].is_leaf:
            raise fail("redundant brackets around a phrase", "redundant_group")
        return SpanTree((start, len(words)), tuple(children))

    if not tokens:
        raise fail("empty tree", "empty_group")
    tree = read()
    if position != len(tokens):
        raise fail("trailing tokens after the tree")
    return tree, words


def from_tree(bracketed_tree_text: str, words: Optional[Sequence[str]] = None) -> PackedForest:
    tree, tree_words = parse_bracketed(bracketed_tree_text)
    if words is not None and len(words) != len(tree_words):
        raise ForestFormatError.single(
            "word_count_mismatch",
            f"tree covers {len(tree_words)} words, sentence has {len(words)}",
            loc=("tree",),
            input=bracketed_tree_text,
        )
    return forest_from_tree(tree, len(tree_words))


def format_bracketed(tree: SpanTree, words: Sequence[str]) -> str:
    if tree.is_leaf:
        return words[tree.span[0]]
    return "(" + " ".join(format_bracketed(child, words) for child in tree.children) + ")"
