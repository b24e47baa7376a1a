from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pytest

from forest_nmt.encoder import Mode
from forest_nmt.model import ModelParams, param_shapes
from forest_nmt.synthetic import SyntheticCorpus, make_toy_corpus

TOY_FOREST = """\
sent 3
node 3 0 2
node 4 1 3
node 5 0 3
edge 3 1.0 0 1
edge 4 1.0 1 2
edge 5 0.6 3 2
edge 5 0.4 0 4
"""


def pytest_configure(config: Any) -> None:
    config.addinivalue_line("markers", "slow: end-to-end training runs, deselect with -m 'not slow'")


def match_pydantic_error_url(error_type: str) -> Any:
    from dirty_equals import IsStr

    return IsStr(regex=rf"^https://errors\.pydantic\.dev/.*/v/{error_type}")


def small_params(mode: Mode, seed: int = 0, *, src_vocab: int = 9, tgt_vocab: int = 8) -> ModelParams:
    return ModelParams.initialize(param_shapes(mode, src_vocab, tgt_vocab, 3, 4), seed, 0.5)


def zero_params(mode: Mode, *, src_vocab: int = 9, tgt_vocab: int = 8, hidden: int = 4) -> ModelParams:
    return ModelParams.zeros(param_shapes(mode, src_vocab, tgt_vocab, 3, hidden))


def write_lines(path: Path, lines: List[str]) -> Path:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


@pytest.fixture
def toy_corpus() -> SyntheticCorpus:
    return make_toy_corpus(0)


@pytest.fixture
def toy_files(tmp_path: Path, toy_corpus: SyntheticCorpus) -> Dict[str, Path]:
    return toy_corpus.write(tmp_path / "data", "toy")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
