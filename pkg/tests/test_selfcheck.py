import numpy as np
import pytest

from forest_nmt.forest import parse_forest, tree_count
from forest_nmt.selfcheck import (
    ENUMERATION_LIMIT,
    forest_oracle_suite,
    gradient_suite,
    oracle_forest,
    random_instance,
    same_forest,
    trial_seeds,
)
from tests.conftest import TOY_FOREST


def test_trial_seeds_are_reproducible():
    assert trial_seeds(3, 4) == trial_seeds(3, 4)
    assert len(set(trial_seeds(3, 4))) == 4
    assert trial_seeds(3, 4) != trial_seeds(4, 4)


@pytest.mark.parametrize("mode", ["vanilla", "tree", "forest"])
def test_random_instance(mode):
    instance = random_instance(mode, 11)
    assert 1 <= len(instance.words) <= 5
    assert instance.target[-1] == 2
    assert (instance.structure is None) == (mode == "vanilla")
    again = random_instance(mode, 11)
    assert again.words == instance.words
    assert again.structure == instance.structure


def test_gradient_suite_passes():
    report = gradient_suite(seed=0, trials=2)
    assert report.passed, report.first_failure
    assert len(report.cases) == 2 * 4
    assert {case.name for case in report.cases} == {"ops", "vanilla-loss", "tree-loss", "forest-loss"}


def test_gradient_suite_catches_a_corrupted_gradient():
    report = gradient_suite(seed=0, trials=1, corrupt="dec.b_o")
    assert not report.passed
    assert {case.name for case in report.failures} == {"vanilla-loss", "tree-loss", "forest-loss"}
    assert report.first_failure.detail["worst_param"] == "dec.b_o"


def test_gradient_suite_is_seeded():
    first = gradient_suite(seed=5, trials=1, modes=["forest"])
    second = gradient_suite(seed=5, trials=1, modes=["forest"])
    assert first.model_dump() == second.model_dump()


def test_forest_oracle_suite_passes():
    report = forest_oracle_suite(seed=0, trials=10)
    assert report.passed, report.first_failure
    assert len(report.cases) == 10
    assert all(case.detail["tree_count"] == case.detail["enumerated"] for case in report.cases)


def test_same_forest():
    forest = parse_forest(TOY_FOREST)
    assert same_forest(forest, parse_forest(TOY_FOREST))
    assert not same_forest(forest, parse_forest(TOY_FOREST.replace("edge 5 0.6", "edge 5 0.5")))


def test_forest_instances_stay_small():
    assert all(tree_count(random_instance("forest", seed).structure) <= 4 for seed in range(30))


def test_oracle_forests_respect_the_enumeration_limit():
    rng = np.random.default_rng(7)
    counts = [tree_count(oracle_forest(rng, 11)) for _ in range(60)]
    assert max(counts) <= ENUMERATION_LIMIT
    assert min(counts) >= 1


def test_gradient_suite_without_ops():
    report = gradient_suite(seed=2, trials=1, modes=["tree"], include_ops=False)
    assert [case.name for case in report.cases] == ["tree-loss"]


@pytest.mark.slow
def test_gradient_checks_over_a_hundred_instances():
    report = gradient_suite(seed=1, trials=100, max_entries=4, include_ops=False)
    assert len(report.cases) == 300
    assert report.passed, report.first_failure


@pytest.mark.slow
def test_forest_oracles_over_a_thousand_forests():
    report = forest_oracle_suite(seed=1, trials=1000)
    assert len(report.cases) == 1000
    assert report.passed, report.first_failure
    assert max(case.detail["tree_count"] for case in report.cases) > 1000
