"""Minibatch SGD with validation-based early stopping and checkpoints."""

import logging
import math
import os
import tempfile
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from forest_nmt.corpus import Bitext, SentencePair, Vocabulary, build_vocab
from forest_nmt.encoder import Mode
from forest_nmt.evaluation import perplexity
from forest_nmt.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    ErrorList,
    ForestNMTError,
    NumericError,
    error_detail,
)
from forest_nmt.model import ModelParams, NMTModel, param_shapes
from forest_nmt.numcore import Tape

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
META_KEY = "__meta__"
PARAM_PREFIX = "param/"

Grads = Dict[str, np.ndarray]


def _regenerate_with_loc(errors: ErrorList, loc: Tuple[str, ...]) -> ErrorList:
    return [{**error, "loc": loc + tuple(error["loc"])} for error in errors]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Mode = "forest"
    hidden: int = Field(256, gt=0)
    embed: int = Field(256, gt=0)
    lr: float = Field(0.1, ge=0)
    batch_size: int = Field(128, gt=0)
    max_epochs: int = Field(20, gt=0)
    patience: Optional[int] = Field(3, gt=0)
    seed: int = Field(0, ge=0)
    min_freq: int = Field(5, gt=0)
    max_len: int = Field(50, gt=0)
    clip_norm: Optional[float] = Field(5.0, gt=0)
    lr_decay: float = Field(0.5, gt=0, le=1)
    init_scale: float = Field(0.08, gt=0)
    threads: int = Field(1, gt=0)
    lowercase: bool = False

    @classmethod
    def build(cls, **values: object) -> "TrainConfig":
        try:
            return cls.model_validate(values)
        except ValidationError as exc:
            raise ConfigError(_regenerate_with_loc(exc.errors(), ("config",))) from None


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    dev_perplexity: float
    lr: float
    seconds: float = 0.0

    def csv_row(self) -> List[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.dev_perplexity), repr(self.lr)]


METRICS_CSV_HEADER = ["epoch", "train_loss", "dev_perplexity", "lr"]


class CheckpointMeta(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    mode: Mode
    epoch: int
    dev_perplexity: float
    config: TrainConfig
    src_vocab: List[str]
    tgt_vocab: List[str]
    shapes: Dict[str, List[int]]


class _FormatVersion(BaseModel):
    format_version: int


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    arrays: Dict[str, np.ndarray] = field(repr=False)

    @property
    def mode(self) -> Mode:
        return self.meta.mode

    @property
    def epoch(self) -> int:
        return self.meta.epoch

    @property
    def dev_perplexity(self) -> float:
        return self.meta.dev_perplexity

    @property
    def config(self) -> TrainConfig:
        return self.meta.config

    def params(self) -> ModelParams:
        params = ModelParams.zeros({name: tuple(shape) for name, shape in self.meta.shapes.items()})
        params.load_arrays(self.arrays)
        return params

    def to_model(self) -> NMTModel:
        return NMTModel(
            self.meta.mode,
            self.params(),
            Vocabulary(self.meta.src_vocab),
            Vocabulary(self.meta.tgt_vocab),
        )

    @classmethod
    def snapshot(
        cls, model: NMTModel, config: TrainConfig, epoch: int, dev_perplexity: float
    ) -> "Checkpoint":
        return cls(
            CheckpointMeta(
                mode=model.mode,
                epoch=epoch,
                dev_perplexity=dev_perplexity,
                config=config,
                src_vocab=model.src_vocab.words,
                tgt_vocab=model.tgt_vocab.words,
                shapes={name: list(shape) for name, shape in model.params.shapes().items()},
            ),
            model.params.arrays(),
        )


@dataclass
class TrainingResult:
    best: Checkpoint
    history: List[EpochMetrics]
    stopped_early: bool = False

    def best_model(self) -> NMTModel:
        return self.best.to_model()


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    target = Path(path)
    payload = {META_KEY: np.array(checkpoint.meta.model_dump_json())}
    payload.update({PARAM_PREFIX + name: array for name, array in checkpoint.arrays.items()})
    target.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(dir=target.parent, prefix=target.name, suffix=".tmp", delete=False)
    try:
        with handle:
            np.savez(handle, **payload)
        os.replace(handle.name, target)
    except BaseException:
        os.unlink(handle.name)
        raise
    logger.info("checkpoint written to %s (epoch %d)", target, checkpoint.epoch)


def _corrupt(path: Union[str, Path], msg: str) -> CheckpointError:
    return CheckpointError.single("corrupt_checkpoint", f"{path}: {msg}", loc=("checkpoint", str(path)))


def load_checkpoint(path: Union[str, Path], expected_mode: Optional[Mode] = None) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as archive:
            if META_KEY not in archive.files:
                raise _corrupt(path, "missing metadata")
            meta_json = str(archive[META_KEY])
            arrays = {
                name[len(PARAM_PREFIX) :]: np.array(archive[name], dtype=np.float64)
                for name in archive.files
                if name.startswith(PARAM_PREFIX)
            }
    except ForestNMTError:
        raise
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise _corrupt(path, f"unreadable archive ({exc})") from None

    try:
        version = _FormatVersion.model_validate_json(meta_json).format_version
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError.single(
                "version_mismatch",
                f"{path}: checkpoint format {version}, this build reads {CHECKPOINT_FORMAT_VERSION}",
                loc=("checkpoint", "format_version"),
                input=version,
            )
        meta = CheckpointMeta.model_validate_json(meta_json)
    except ValidationError as exc:
        raise CheckpointError(_regenerate_with_loc(exc.errors(), ("checkpoint", "meta"))) from None
    checkpoint = Checkpoint(meta, arrays)
    try:
        checkpoint.params()
    except DimensionError as exc:
        raise CheckpointError(_regenerate_with_loc(exc.errors, ("checkpoint", str(path)))) from None
    if expected_mode is not None and meta.mode != expected_mode:
        raise ConfigError.single(
            "mode_mismatch",
            f"checkpoint was trained in {meta.mode} mode, {expected_mode} requested",
            loc=("config", "mode"),
            input=expected_mode,
        )
    return checkpoint


def grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Grads, max_norm: float) -> float:
    """Rescale ``grads`` in place to a global norm of at most ``max_norm``; returns the norm before clipping."""
    norm = grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def _check_finite(grads: Mapping[str, np.ndarray], loc: Tuple[object, ...]) -> None:
    bad = {name: float(np.linalg.norm(g)) for name, g in grads.items() if not np.all(np.isfinite(g))}
    if bad:
        raise NumericError.single(
            "non_finite_gradient",
            f"non-finite gradients for {sorted(bad)}",
            loc=loc,
            ctx={"grad_norms": bad},
        )


def sgd_step(params: ModelParams, grads: Grads, lr: float) -> None:
    _check_finite(grads, ("sgd_step",))
    for name, g in grads.items():
        params[name].data -= lr * g
    grads.clear()
    params.zero_grad()


def sentence_gradients(model: NMTModel, pair: SentencePair) -> Tuple[float, Grads]:
    with Tape() as tape:
        loss = model.loss(pair)
    return loss.item(), tape.gradients_for(loss, model.params)


@dataclass
class _Batcher:
    model: NMTModel
    threads: int
    _pool: Optional[ThreadPoolExecutor] = None

    def __enter__(self) -> "_Batcher":
        if self.threads > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="forest-nmt")
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def gradients(self, batch: Sequence[SentencePair]) -> Tuple[float, Grads]:
        if self._pool is None:
            results: Iterator[Tuple[float, Grads]] = (sentence_gradients(self.model, p) for p in batch)
        else:
            results = self._pool.map(lambda p: sentence_gradients(self.model, p), batch)
        total = 0.0
        summed: Grads = {}
        for loss, grads in results:
            total += loss
            for name, g in grads.items():
                if name in summed:
                    summed[name] += g
                else:
                    summed[name] = g.copy()
        for g in summed.values():
            g /= len(batch)
        return total / len(batch), summed


def _check_inputs(train_set: Bitext, dev_set: Bitext, mode: Mode) -> None:
    errors: ErrorList = []
    for name, split in (("train", train_set), ("dev", dev_set)):
        if not len(split):
            errors.append(error_detail("empty_split", f"{name} split is empty", loc=("bitext", name)))
    if errors:
        raise DataError(errors)
    for name, split in (("train", train_set), ("dev", dev_set)):
        if mode == "forest" and not split.has_forests:
            errors.append(error_detail("missing", f"forest mode needs forests for the {name} split", loc=("bitext", name)))
        if mode == "tree" and not (split.has_trees or split.has_forests):
            errors.append(
                error_detail("missing", f"tree mode needs trees or forests for the {name} split", loc=("bitext", name))
            )
    if errors:
        raise ConfigError(errors)
    if mode == "tree":
        train_set.check_binary_trees()
        dev_set.check_binary_trees()


EpochCallback = Callable[[EpochMetrics, NMTModel], None]


def train(
    train_set: Bitext,
    dev_set: Bitext,
    config: TrainConfig,
    *,
    model: Optional[NMTModel] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainingResult:
    """Train ``config.mode`` on ``train_set``, early-stopping on dev perplexity.

    Each minibatch accumulates per-sentence gradients (each sentence on its own
    tape), averages them, clips the global norm and takes one SGD step. The
    learning rate is multiplied by ``lr_decay`` after every epoch that does
    not improve dev perplexity. The best epoch's parameters are returned.
    """
    _check_inputs(train_set, dev_set, config.mode)
    init_seed, shuffle_seed = np.random.SeedSequence(config.seed).spawn(2)
    if model is None:
        src_vocab = build_vocab(train_set.sources(), config.min_freq)
        tgt_vocab = build_vocab(train_set.targets(), config.min_freq)
        model = NMTModel(
            config.mode,
            ModelParams.initialize(
                param_shapes(config.mode, len(src_vocab), len(tgt_vocab), config.embed, config.hidden),
                init_seed,
                config.init_scale,
            ),
            src_vocab,
            tgt_vocab,
        )
        logger.info(
            "%s model: |V_src|=%d |V_tgt|=%d, %d parameters",
            config.mode,
            len(src_vocab),
            len(tgt_vocab),
            model.params.num_values(),
        )
    rng = np.random.default_rng(shuffle_seed)
    lr = config.lr
    history: List[EpochMetrics] = []
    best: Optional[Checkpoint] = None
    stale = 0
    stopped_early = False
    n = len(train_set)

    with _Batcher(model, config.threads) as batcher:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(n)
            total_loss = 0.0
            for batch_index, start in enumerate(range(0, n, config.batch_size)):
                batch = [train_set[int(i)] for i in order[start : start + config.batch_size]]
                loc = ("train", f"epoch {epoch}", f"batch {batch_index}")
                try:
                    loss, grads = batcher.gradients(batch)
                    _check_finite(grads, loc)
                except NumericError as exc:
                    raise NumericError(
                        [{**error, "loc": loc + tuple(error["loc"])} for error in exc.errors]
                    ) from None
                total_loss += loss * len(batch)
                if config.clip_norm is not None:
                    norm = clip_gradients(grads, config.clip_norm)
                    if norm > config.clip_norm:
                        logger.debug("epoch %d batch %d: clipped gradient norm %.3f", epoch, batch_index, norm)
                sgd_step(model.params, grads, lr)

            metrics = EpochMetrics(
                epoch=epoch,
                train_loss=total_loss / n,
                dev_perplexity=perplexity(model, dev_set),
                lr=lr,
                seconds=time.perf_counter() - started,
            )
            history.append(metrics)
            logger.info(
                "epoch %d: train loss %.4f, dev perplexity %.4f, lr %g",
                epoch,
                metrics.train_loss,
                metrics.dev_perplexity,
                lr,
            )
            if on_epoch is not None:
                on_epoch(metrics, model)

            if best is None or metrics.dev_perplexity < best.dev_perplexity:
                best = Checkpoint.snapshot(model, config, epoch, metrics.dev_perplexity)
                stale = 0
                continue
            stale += 1
            if config.patience is not None and stale >= config.patience:
                logger.info("early stopping after epoch %d (best epoch %d)", epoch, best.epoch)
                stopped_early = True
                break
            if config.lr_decay < 1.0:
                lr *= config.lr_decay
                logger.info("dev perplexity did not improve, learning rate now %g", lr)

    assert best is not None
    return TrainingResult(best, history, stopped_early)
