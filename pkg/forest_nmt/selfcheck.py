import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from forest_nmt.corpus import EOS_ID
from forest_nmt.decoder import sentence_loss
from forest_nmt.encoder import MODES, Mode, encode_forest, encode_source, encode_tree
from forest_nmt.exceptions import ForestNMTError
from forest_nmt.forest import (
    PackedForest,
    SpanTree,
    best_tree,
    enumerate_trees,
    forest_from_tree,
    forest_from_trees,
    format_forest,
    parse_forest,
    topo_order,
    tree_count,
)
from forest_nmt.model import ModelParams, param_shapes
from forest_nmt.numcore import GradCheckReport, Tensor, grad_check, no_grad
from forest_nmt import numcore
from forest_nmt.synthetic import random_binary_tree, random_chart_forest, random_forest

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 10_000
MAX_INSTANCE_TREES = 4
ENCODE_SAMPLE = 8
CHART_RETRIES = 8


class CheckCase(BaseModel):
    suite: str
    trial: int
    seed: int
    name: str
    passed: bool
    detail: Dict[str, Any] = {}


class CheckReport(BaseModel):
    suite: str
    seed: int
    cases: List[CheckCase] = []

    @property
    def passed(self) -> bool:
        return all(case.passed for case in self.cases)

    @property
    def failures(self) -> List[CheckCase]:
        return [case for case in self.cases if not case.passed]

    @property
    def first_failure(self) -> Optional[CheckCase]:
        return next(iter(self.failures), None)


def trial_seeds(seed: int, trials: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(trials)]


@dataclass
class ModelInstance:
    mode: Mode
    seed: int
    params: ModelParams
    words: List[int]
    target: List[int]
    structure: Union[PackedForest, SpanTree, None] = None


def random_instance(
    mode: Mode,
    seed: int,
    *,
    max_words: int = 5,
    hidden: int = 4,
    embed: int = 3,
    src_vocab: int = 9,
    tgt_vocab: int = 8,
    scale: float = 0.5,
) -> ModelInstance:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_words + 1))
    words = [int(w) for w in rng.integers(0, src_vocab, size=n)]
    target = [int(t) for t in rng.integers(3, tgt_vocab, size=int(rng.integers(0, 3)))] + [EOS_ID]
    structure = None
    if mode == "tree":
        structure = random_binary_tree(n, rng)
    elif mode == "forest":
        structure = random_forest(n, rng, max_trees=3, max_arity=3)
        while tree_count(structure) > MAX_INSTANCE_TREES:
            structure = random_forest(n, rng, max_trees=3, max_arity=3)
    params = ModelParams.initialize(
        param_shapes(mode, src_vocab, tgt_vocab, embed, hidden), int(rng.integers(2**31)), scale
    )
    return ModelInstance(mode, seed, params, words, target, structure)


def instance_loss(instance: ModelInstance) -> Callable[[Mapping[str, Tensor]], Tensor]:
    def loss(params: Mapping[str, Tensor]) -> Tensor:
        encoded = encode_source(instance.words, instance.structure, params, instance.mode)
        return sentence_loss(encoded, instance.target, params)

    return loss


def _ops_loss(rng: np.random.Generator) -> Tuple[Dict[str, Tensor], Callable[[Mapping[str, Tensor]], Tensor]]:
    params = {
        "A": numcore.parameter(rng.normal(size=(3, 4)), name="A"),
        "B": numcore.parameter(rng.normal(size=(4, 2)), name="B"),
        "x": numcore.parameter(rng.normal(size=(4,)), name="x"),
        "y": numcore.parameter(rng.normal(size=(3,)), name="y"),
    }

    def loss(p: Mapping[str, Tensor]) -> Tensor:
        h = numcore.tanh(numcore.add(numcore.matmul(p["A"], p["x"]), p["y"]))
        g = numcore.sigmoid(numcore.matmul(numcore.transpose(p["B"]), p["x"]))
        joined = numcore.concat([h, g, numcore.scale(p["y"], 0.5)])
        mixed = numcore.stack([numcore.mul(h, p["y"]), numcore.sub(h, p["y"])])
        attn = numcore.softmax(numcore.matmul(mixed, h))
        table = numcore.matmul(p["A"], p["B"])
        parts = [
            numcore.sum_all(joined),
            numcore.sum_all(numcore.matmul(attn, mixed)),
            numcore.sum_all(numcore.embedding(table, 1)),
            numcore.cross_entropy(joined, 2),
        ]
        return numcore.add_n(parts)

    return params, loss


def _grad_case(name: str, trial: int, seed: int, report: GradCheckReport) -> CheckCase:
    return CheckCase(
        suite="gradient",
        trial=trial,
        seed=seed,
        name=name,
        passed=report.passed,
        detail=report.model_dump(exclude={"per_param"}),
    )


def gradient_suite(
    seed: int = 0,
    trials: int = 6,
    *,
    tolerance: float = 1e-4,
    modes: Sequence[Mode] = MODES,
    corrupt: Optional[str] = None,
    max_entries: Optional[int] = 12,
    include_ops: bool = True,
) -> CheckReport:
    """Finite-difference checks of the primitive ops and of the full loss in each mode.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed; it applies to every model instance that has that parameter.
    """
    report = CheckReport(suite="gradient", seed=seed)
    for trial, trial_seed in enumerate(trial_seeds(seed, trials)):
        if include_ops:
            params, loss = _ops_loss(np.random.default_rng(trial_seed))
            op_report = grad_check(loss, params, tolerance, max_entries=max_entries, seed=trial_seed)
            report.cases.append(_grad_case("ops", trial, trial_seed, op_report))
        for mode in modes:
            instance = random_instance(mode, trial_seed)
            fault = corrupt if corrupt in instance.params else None
            result = grad_check(
                instance_loss(instance),
                instance.params,
                tolerance,
                max_entries=max_entries,
                seed=trial_seed,
                corrupt=fault,
            )
            case = _grad_case(f"{mode}-loss", trial, trial_seed, result)
            case.detail.update(words=instance.words, target=instance.target)
            if instance.structure is not None:
                case.detail["structure"] = (
                    format_forest(instance.structure)
                    if isinstance(instance.structure, PackedForest)
                    else repr(instance.structure)
                )
            report.cases.append(case)
        logger.debug("gradient trial %d done", trial)
    logger.info(
        "gradient suite: %d cases, %d failed", len(report.cases), len(report.failures)
    )
    return report


def same_forest(a: PackedForest, b: PackedForest, tolerance: float = 1e-12) -> bool:
    if (a.sentence_len, a.root, a.nodes) != (b.sentence_len, b.root, b.nodes):
        return False
    if [(e.head, e.tails) for e in a.edges] != [(e.head, e.tails) for e in b.edges]:
        return False
    return all(math.isclose(x.prob, y.prob, rel_tol=tolerance) for x, y in zip(a.edges, b.edges))


EncoderParams = Dict[str, ModelParams]


def encoder_params(max_words: int, seed: int = 0) -> EncoderParams:
    return {
        mode: ModelParams.initialize(param_shapes(mode, max_words, 5, 2, 2), seed, 0.5)
        for mode in ("tree", "forest")
    }


def _attendable_mismatches(
    forest: PackedForest, trees: Sequence[SpanTree], encoders: EncoderParams, seed: int
) -> List[str]:
    binary = [tree for tree in trees if tree.is_binary()]
    if len(binary) > ENCODE_SAMPLE:
        picked = np.random.default_rng(seed).choice(len(binary), size=ENCODE_SAMPLE, replace=False)
        binary = [binary[i] for i in sorted(picked)]
    words = list(range(forest.sentence_len))
    problems = []
    with no_grad():
        for tree in binary:
            via_tree = encode_tree(words, tree, encoders["tree"]).num_attendable
            single = forest_from_tree(tree, forest.sentence_len)
            via_forest = encode_forest(words, single, encoders["forest"]).num_attendable
            if via_tree != via_forest:
                problems.append(f"tree {tree} has {via_tree} attendable states, its forest {via_forest}")
    return problems


def _forest_case(
    trial: int, seed: int, forest: PackedForest, encoders: Optional[EncoderParams] = None
) -> CheckCase:
    detail: Dict[str, Any] = {"forest": format_forest(forest)}
    problems: List[str] = []
    count = tree_count(forest)
    detail["tree_count"] = count
    trees = enumerate_trees(forest, ENUMERATION_LIMIT)
    detail["enumerated"] = len(trees)
    if len(trees) != count:
        problems.append("tree_count differs from enumeration")
    if len(set(trees)) != len(trees):
        problems.append("enumeration yields duplicate trees")

    order = topo_order(forest)
    position = {node_id: index for index, node_id in enumerate(order)}
    if sorted(order) != sorted(node.id for node in forest.nodes):
        problems.append("topo_order is not a permutation of the nodes")
    elif any(position[t] >= position[e.head] for e in forest.edges for t in e.tails):
        problems.append("topo_order places a head before its tails")

    if best_tree(forest) not in trees:
        problems.append("best_tree is not one of the enumerated trees")

    reparsed = parse_forest(format_forest(forest))
    if not same_forest(reparsed, forest):
        problems.append("format/parse round trip changed the forest")

    repacked = forest_from_trees(trees, sentence_len=forest.sentence_len)
    if tree_count(repacked) != count:
        problems.append("repacking the enumerated trees changed the count")

    if encoders is not None:
        problems.extend(_attendable_mismatches(forest, trees, encoders, seed))

    detail["problems"] = problems
    return CheckCase(suite="forest", trial=trial, seed=seed, name="forest-oracle", passed=not problems, detail=detail)


def oracle_forest(rng: np.random.Generator, max_words: int) -> PackedForest:
    """Packed random derivations (arity up to 3) or a chart forest of at most
    ``ENUMERATION_LIMIT`` trees, with equal odds."""
    n = int(rng.integers(1, max_words + 1))
    if rng.random() < 0.5:
        return random_forest(n, rng, max_trees=5, max_arity=3)
    density = float(rng.uniform(0.2, 1.0))
    for _ in range(CHART_RETRIES):
        forest = random_chart_forest(n, rng, density)
        if tree_count(forest) <= ENUMERATION_LIMIT:
            return forest
        density *= 0.7
    return random_chart_forest(n, rng, 0.0)


def forest_oracle_suite(seed: int = 0, trials: int = 20, max_words: int = 11) -> CheckReport:
    """Compare the forest dynamic programs against brute-force enumeration, and the tree
    encoder against the forest encoder on sampled trees."""
    report = CheckReport(suite="forest", seed=seed)
    encoders = encoder_params(max_words, seed)
    for trial, trial_seed in enumerate(trial_seeds(seed, trials)):
        rng = np.random.default_rng(trial_seed)
        try:
            forest = oracle_forest(rng, max_words)
            report.cases.append(_forest_case(trial, trial_seed, forest, encoders))
        except ForestNMTError as exc:
            report.cases.append(
                CheckCase(
                    suite="forest",
                    trial=trial,
                    seed=trial_seed,
                    name="forest-oracle",
                    passed=False,
                    detail={"error": str(exc), "errors": [dict(e) for e in exc.errors]},
                )
            )
    logger.info("forest suite: %d cases, %d failed", len(report.cases), len(report.failures))
    return report
