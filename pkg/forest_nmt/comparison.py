import csv
import logging
from typing import IO, Dict, List, Sequence, Tuple

from pydantic import BaseModel

from forest_nmt.corpus import Bitext
from forest_nmt.encoder import Mode
from forest_nmt.train import TrainConfig, train

logger = logging.getLogger(__name__)

EXPECTED_ORDER: Tuple[Mode, ...] = ("forest", "tree", "vanilla")
TIE_TOLERANCE = 0.02


class ModeRun(BaseModel):
    mode: Mode
    seed: int
    best_epoch: int
    dev_perplexity: float


class ModeComparison(BaseModel):
    runs: List[ModeRun]
    tolerance: float = TIE_TOLERANCE

    def modes(self) -> List[Mode]:
        return [mode for mode in EXPECTED_ORDER if any(run.mode == mode for run in self.runs)]

    def mean(self, mode: Mode) -> float:
        values = [run.dev_perplexity for run in self.runs if run.mode == mode]
        return sum(values) / len(values)

    def means(self) -> Dict[str, float]:
        return {mode: self.mean(mode) for mode in self.modes()}

    def reversals(self) -> List[Tuple[Mode, Mode]]:
        modes = self.modes()
        return [
            (richer, poorer)
            for richer, poorer in zip(modes, modes[1:])
            if self.mean(richer) > self.mean(poorer) * (1.0 + self.tolerance)
        ]

    @property
    def ordered(self) -> bool:
        return not self.reversals()


def compare_modes(
    train_set: Bitext,
    dev_set: Bitext,
    config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    modes: Sequence[Mode] = EXPECTED_ORDER,
    tolerance: float = TIE_TOLERANCE,
) -> ModeComparison:
    runs: List[ModeRun] = []
    for mode in modes:
        for seed in seeds:
            result = train(train_set, dev_set, config.model_copy(update={"mode": mode, "seed": seed}))
            runs.append(
                ModeRun(
                    mode=mode,
                    seed=seed,
                    best_epoch=result.best.epoch,
                    dev_perplexity=result.best.dev_perplexity,
                )
            )
            logger.info(
                "%s seed %d: best dev perplexity %.4f at epoch %d",
                mode,
                seed,
                result.best.dev_perplexity,
                result.best.epoch,
            )
    return ModeComparison(runs=runs, tolerance=tolerance)


def write_comparison_csv(comparison: ModeComparison, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["mode", "seed", "best_epoch", "dev_perplexity"])
    for run in comparison.runs:
        writer.writerow([run.mode, run.seed, run.best_epoch, repr(run.dev_perplexity)])
