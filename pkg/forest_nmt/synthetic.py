"""Random trees and forests, plus deterministic toy and synthetic corpora.

In the synthetic corpora the target is a function of the gold source
bracketing: words go through a fixed dictionary and the children of every
phrase are swapped when the left child is wider than the right one. The
forests contain the gold tree and distractor derivations; in a fraction of
the sentences (``ambiguity``) a distractor outranks the gold tree, so the
1-best tree is wrong while the forest still holds the right one.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from forest_nmt.corpus import Bitext, SentencePair
from forest_nmt.forest import (
    PackedForest,
    Span,
    SpanTree,
    best_tree,
    build_forest,
    format_bracketed,
    format_forest,
    forest_from_trees,
)

logger = logging.getLogger(__name__)

DISTRACTOR_TRIES = 8
GOLD_WEIGHT = 10.0
MISLEADING_WEIGHT = 50.0


def random_tree(start: int, end: int, rng: np.random.Generator, max_arity: int = 2) -> SpanTree:
    width = end - start
    if width == 1:
        return SpanTree((start, end))
    arity = int(rng.integers(2, min(max_arity, width) + 1))
    cuts = sorted(int(c) for c in rng.choice(np.arange(start + 1, end), size=arity - 1, replace=False))
    bounds = [start, *cuts, end]
    return SpanTree(
        (start, end),
        tuple(random_tree(a, b, rng, max_arity) for a, b in zip(bounds, bounds[1:])),
    )


def random_binary_tree(n: int, rng: np.random.Generator) -> SpanTree:
    return random_tree(0, n, rng, 2)


def random_forest(
    n: int, rng: np.random.Generator, max_trees: int = 4, max_arity: int = 2
) -> PackedForest:
    count = int(rng.integers(1, max_trees + 1))
    trees = [random_tree(0, n, rng, max_arity) for _ in range(count)]
    weights = [float(w) for w in rng.uniform(0.1, 1.0, size=count)]
    return forest_from_trees(trees, weights, n)


def random_chart_forest(n: int, rng: np.random.Generator, density: float = 0.5) -> PackedForest:
    """Binary edges over every span and split point, each kept with probability ``density``.

    The edges of one random binary tree are always kept, so the root is
    derivable; at ``density=1`` an ``n``-word forest holds Catalan(n-1) trees.
    """
    gold = random_binary_tree(n, rng)
    keep = {
        (node.span, node.children[0].span[1]) for node in gold.internal_nodes()
    }
    derivable = {(i, i + 1) for i in range(n)}
    chosen: List[Tuple[Span, int]] = []
    for width in range(2, n + 1):
        for start in range(0, n - width + 1):
            span = (start, start + width)
            for split in range(start + 1, span[1]):
                if (span, split) not in keep and (
                    (start, split) not in derivable
                    or (split, span[1]) not in derivable
                    or rng.random() >= density
                ):
                    continue
                chosen.append((span, split))
                derivable.add(span)
    phrase_ids: Dict[Span, int] = {}
    for span, _ in chosen:
        phrase_ids.setdefault(span, n + len(phrase_ids))

    def node_of(span: Span) -> int:
        return span[0] if span[1] - span[0] == 1 else phrase_ids[span]

    weights = rng.uniform(0.1, 1.0, size=len(chosen))
    return build_forest(
        n,
        [(node_id, span[0], span[1]) for span, node_id in phrase_ids.items()],
        [
            (phrase_ids[span], float(weight), [node_of((span[0], split)), node_of((split, span[1]))])
            for (span, split), weight in zip(chosen, weights)
        ],
    )


def reorder(tree: SpanTree) -> List[int]:
    if tree.is_leaf:
        return [tree.span[0]]
    children = list(tree.children)
    if len(children) == 2:
        left, right = children
        if left.span[1] - left.span[0] > right.span[1] - right.span[0]:
            children = [right, left]
    return [position for child in children for position in reorder(child)]


def source_word(index: int) -> str:
    return f"s{index}"


def target_word(index: int, vocab_size: int) -> str:
    return f"t{(7 * index + 3) % vocab_size}"


@dataclass
class SyntheticCorpus:
    bitext: Bitext
    gold_trees: List[SpanTree]
    misleading: List[bool]

    @property
    def misleading_rate(self) -> float:
        return sum(self.misleading) / len(self.misleading) if self.misleading else 0.0

    def write(self, directory: Union[str, Path], prefix: str) -> Dict[str, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {kind: out / f"{prefix}.{kind}" for kind in ("src", "tgt", "forest", "tree")}
        pairs = self.bitext.pairs
        paths["src"].write_text("".join(" ".join(p.source) + "\n" for p in pairs), encoding="utf-8")
        paths["tgt"].write_text("".join(" ".join(p.target) + "\n" for p in pairs), encoding="utf-8")
        paths["forest"].write_text(
            "\n".join(format_forest(p.forest) for p in pairs if p.forest is not None), encoding="utf-8"
        )
        paths["tree"].write_text(
            "".join(format_bracketed(tree, p.source) + "\n" for tree, p in zip(self.gold_trees, pairs)),
            encoding="utf-8",
        )
        return paths


def _distractors(n: int, gold: SpanTree, rng: np.random.Generator, count: int) -> List[SpanTree]:
    result: List[SpanTree] = []
    for _ in range(count * DISTRACTOR_TRIES):
        if len(result) == count:
            break
        tree = random_binary_tree(n, rng)
        if tree != gold and tree not in result:
            result.append(tree)
    return result


def _sentence_forest(
    n: int, gold: SpanTree, rng: np.random.Generator, mislead: bool
) -> Tuple[PackedForest, bool]:
    for _ in range(DISTRACTOR_TRIES):
        distractors = _distractors(n, gold, rng, int(rng.integers(1, 4)))
        if not distractors:
            break
        weights = [GOLD_WEIGHT] + [1.0] * len(distractors)
        if mislead:
            weights[1] = MISLEADING_WEIGHT
        forest = forest_from_trees([gold, *distractors], weights, n)
        if (best_tree(forest) != gold) == mislead:
            return forest, mislead
    return forest_from_trees([gold], [1.0], n), False


def make_synthetic_corpus(
    n_pairs: int = 500,
    ambiguity: float = 0.3,
    seed: int = 0,
    *,
    min_len: int = 3,
    max_len: int = 12,
    vocab_size: int = 20,
) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    pairs: List[SentencePair] = []
    gold_trees: List[SpanTree] = []
    misleading: List[bool] = []
    for index in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        ids = [int(i) for i in rng.integers(0, vocab_size, size=n)]
        gold = random_binary_tree(n, rng)
        want_mislead = n > 2 and bool(rng.random() < ambiguity)
        forest, mislead = _sentence_forest(n, gold, rng, want_mislead)
        source = tuple(source_word(i) for i in ids)
        target = tuple(target_word(ids[p], vocab_size) for p in reorder(gold))
        pairs.append(SentencePair(source, target, forest, None, index + 1))
        gold_trees.append(gold)
        misleading.append(mislead)
    corpus = SyntheticCorpus(Bitext(pairs), gold_trees, misleading)
    logger.info(
        "synthetic corpus: %d pairs, %.1f%% with a misleading 1-best tree",
        n_pairs,
        100 * corpus.misleading_rate,
    )
    return corpus


def make_toy_corpus(seed: int = 0) -> SyntheticCorpus:
    """32 short pairs over a tiny vocabulary; small enough to memorize."""
    return make_synthetic_corpus(32, 0.0, seed, min_len=2, max_len=5, vocab_size=8)


def split_corpus(corpus: SyntheticCorpus, sizes: Sequence[int]) -> List[SyntheticCorpus]:
    result = []
    start = 0
    for size, split in zip(sizes, ("train", "dev", "test")):
        end = start + size
        result.append(
            SyntheticCorpus(
                Bitext(corpus.bitext.pairs[start:end], split),  # type: ignore[arg-type]
                corpus.gold_trees[start:end],
                corpus.misleading[start:end],
            )
        )
        start = end
    return result
