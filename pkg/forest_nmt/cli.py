"""``forest-nmt`` command line: one entry point, one subcommand per pipeline step.

Exit codes: 0 success, 1 failed self-check or internal error, 2 configuration
error, 3 data error, 4 numeric abort. Diagnostics go to stderr, data to stdout.
"""

import logging
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, DirectoryPath, FilePath

from forest_nmt import __version__
from forest_nmt.command import CommandValidator, command
from forest_nmt.comparison import TIE_TOLERANCE, compare_modes, write_comparison_csv
from forest_nmt.corpus import build_vocab, load_bitext, load_sources, read_lines, tokenize_lines
from forest_nmt.decoder import AttentionRecord
from forest_nmt.encoder import Mode
from forest_nmt.evaluation import (
    attention_ratio,
    bucket_attention_ratio,
    bucket_bleu,
    corpus_bleu,
    format_bleu,
    write_bleu_csv,
    write_bucket_csv,
    write_ratio_csv,
)
from forest_nmt.exception_handlers import EXIT_CONFIG, EXIT_OK
from forest_nmt.exceptions import CheckFailure, ConfigError, DataError, error_detail
from forest_nmt.flag_functions import Flag, Switch
from forest_nmt.selfcheck import forest_oracle_suite, gradient_suite
from forest_nmt.synthetic import make_synthetic_corpus, make_toy_corpus, split_corpus
from forest_nmt.train import (
    METRICS_CSV_HEADER,
    EpochMetrics,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from forest_nmt.utils import sha256_digest

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.npz"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class FileDigest(BaseModel):
    path: str
    sha256: str
    size: int

    @classmethod
    def of(cls, path: Path) -> "FileDigest":
        return cls(path=str(path), sha256=sha256_digest(path), size=path.stat().st_size)


class RunManifest(BaseModel):
    command: str
    version: str = __version__
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, FileDigest]
    outputs: Dict[str, str] = {}
    timings: Dict[str, float] = {}
    epoch_seconds: List[float] = []

    def write(self, path: Path) -> None:
        _write_atomic(path, self.model_dump_json(indent=2) + "\n")


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(
        "w", encoding="utf-8", dir=path.parent, prefix=path.name, suffix=".tmp", delete=False
    )
    with handle:
        handle.write(text)
    os.replace(handle.name, path)


def _digests(**paths: Optional[Path]) -> Dict[str, FileDigest]:
    return {name: FileDigest.of(path) for name, path in paths.items() if path is not None}


def _require(condition: bool, flag: str, msg: str) -> None:
    if not condition:
        raise ConfigError.single("missing", msg, loc=("flag", flag))


def write_metrics_csv(history: Sequence[EpochMetrics], path: Path) -> None:
    lines = [",".join(METRICS_CSV_HEADER)]
    lines.extend(",".join(metrics.csv_row()) for metrics in history)
    _write_atomic(path, "\n".join(lines) + "\n")


@command
def cmd_train(
    mode: Annotated[Mode, Flag(description="vanilla | tree | forest")],
    src: Annotated[FilePath, Flag()],
    tgt: Annotated[FilePath, Flag()],
    dev_src: Annotated[FilePath, Flag()],
    dev_tgt: Annotated[FilePath, Flag()],
    out: Annotated[Path, Flag(description="output directory")],
    forests: Annotated[Optional[FilePath], Flag()] = None,
    dev_forests: Annotated[Optional[FilePath], Flag()] = None,
    trees: Annotated[Optional[FilePath], Flag(description="bracketed trees, tree mode")] = None,
    dev_trees: Annotated[Optional[FilePath], Flag()] = None,
    hidden: Annotated[int, Flag(gt=0)] = 256,
    embed: Annotated[int, Flag(gt=0)] = 256,
    lr: Annotated[float, Flag(ge=0)] = 0.1,
    batch: Annotated[int, Flag(gt=0)] = 128,
    epochs: Annotated[int, Flag(gt=0)] = 20,
    patience: Annotated[int, Flag(ge=0, description="0 never stops early")] = 3,
    seed: Annotated[int, Flag(ge=0)] = 0,
    min_freq: Annotated[int, Flag(gt=0)] = 5,
    max_len: Annotated[int, Flag(gt=0)] = 50,
    clip_norm: Annotated[float, Flag(gt=0)] = 5.0,
    lr_decay: Annotated[float, Flag(gt=0, le=1)] = 0.5,
    init_scale: Annotated[float, Flag(gt=0)] = 0.08,
    threads: Annotated[int, Flag(gt=0)] = 1,
    lowercase: Annotated[bool, Switch()] = False,
) -> int:
    """Train a model and write checkpoint, metrics and manifest to --out."""
    if mode == "forest":
        _require(forests is not None, "--forests", "--mode forest needs --forests")
        _require(dev_forests is not None, "--dev-forests", "--mode forest needs --dev-forests")
    if mode == "tree":
        _require(forests is not None or trees is not None, "--trees", "--mode tree needs --trees or --forests")
        _require(
            dev_forests is not None or dev_trees is not None,
            "--dev-trees",
            "--mode tree needs --dev-trees or --dev-forests",
        )
    config = TrainConfig.build(
        mode=mode,
        hidden=hidden,
        embed=embed,
        lr=lr,
        batch_size=batch,
        max_epochs=epochs,
        patience=patience or None,
        seed=seed,
        min_freq=min_freq,
        max_len=max_len,
        clip_norm=clip_norm,
        lr_decay=lr_decay,
        init_scale=init_scale,
        threads=threads,
        lowercase=lowercase,
    )
    uses_forests = mode == "forest" or (mode == "tree" and trees is None)
    uses_trees = mode == "tree" and trees is not None
    manifest = RunManifest(
        command="train",
        config=config.model_dump(),
        seed=seed,
        inputs=_digests(
            src=src,
            tgt=tgt,
            dev_src=dev_src,
            dev_tgt=dev_tgt,
            forests=forests if uses_forests else None,
            dev_forests=dev_forests if uses_forests else None,
            trees=trees if uses_trees else None,
            dev_trees=dev_trees if uses_trees else None,
        ),
        outputs={
            "checkpoint": str(out / CHECKPOINT_FILE),
            "metrics": str(out / METRICS_FILE),
        },
    )
    manifest.write(out / MANIFEST_FILE)

    started = time.perf_counter()
    train_set = load_bitext(
        src,
        tgt,
        forests if uses_forests else None,
        tree_path=trees if uses_trees else None,
        max_len=max_len,
        split="train",
        lowercase=lowercase,
    )
    dev_set = load_bitext(
        dev_src,
        dev_tgt,
        dev_forests if uses_forests else None,
        tree_path=dev_trees if uses_trees else None,
        max_len=max_len,
        split="dev",
        lowercase=lowercase,
    )
    manifest.timings["load"] = time.perf_counter() - started

    started = time.perf_counter()
    result = train(train_set, dev_set, config)
    manifest.timings["train"] = time.perf_counter() - started
    manifest.epoch_seconds = [metrics.seconds for metrics in result.history]

    save_checkpoint(result.best, out / CHECKPOINT_FILE)
    write_metrics_csv(result.history, out / METRICS_FILE)
    manifest.write(out / MANIFEST_FILE)
    print(
        f"best epoch {result.best.epoch}: dev perplexity {result.best.dev_perplexity:.4f} "
        f"-> {out / CHECKPOINT_FILE}"
    )
    return EXIT_OK


@command
def cmd_translate(
    checkpoint: Annotated[FilePath, Flag()],
    src: Annotated[FilePath, Flag()],
    out: Annotated[Path, Flag(description="hypotheses file")],
    forests: Annotated[Optional[FilePath], Flag()] = None,
    trees: Annotated[Optional[FilePath], Flag()] = None,
    max_len: Annotated[Optional[int], Flag(gt=0, description="default 2n+5")] = None,
    dump_attention: Annotated[Optional[Path], Flag(description="JSON Lines attention records")] = None,
) -> int:
    """Greedy-decode --src with a trained checkpoint, one hypothesis per line."""
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.to_model()
    if model.mode == "vanilla" and (forests is not None or trees is not None):
        raise ConfigError.single(
            "unexpected_structure", "vanilla checkpoints take no --forests or --trees", loc=("flag", "--forests")
        )
    if model.mode == "forest":
        _require(forests is not None, "--forests", "forest-mode checkpoint needs --forests")
    if model.mode == "tree":
        _require(forests is not None or trees is not None, "--trees", "tree-mode checkpoint needs --trees or --forests")

    sources = load_sources(
        src,
        forests if trees is None else None,
        tree_path=trees,
        lowercase=ckpt.config.lowercase,
    )
    if model.mode == "tree":
        sources.check_binary_trees()
    hypotheses: List[str] = []
    records: List[AttentionRecord] = []
    for pair in sources:
        words, record = model.translate(pair, max_len)
        hypotheses.append(" ".join(words))
        records.append(record)
    truncated = sum(record.truncated for record in records)
    if truncated:
        logger.warning("%d of %d translations hit the length limit", truncated, len(records))
    _write_atomic(out, "".join(line + "\n" for line in hypotheses))
    if dump_attention is not None:
        _write_atomic(dump_attention, "".join(record.model_dump_json() + "\n" for record in records))
    logger.info("translated %d sentences in %s mode", len(hypotheses), model.mode)
    return EXIT_OK


def read_attention(path: Path) -> List[AttentionRecord]:
    records = []
    for number, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            records.append(AttentionRecord.model_validate_json(line))
        except ValueError as exc:
            raise DataError.single(
                "bad_attention_record", f"{path}:{number}: {exc}", loc=("line", number)
            ) from None
    return records


@command
def cmd_eval(
    hyp: Annotated[FilePath, Flag()],
    ref: Annotated[FilePath, Flag()],
    src: Annotated[Optional[FilePath], Flag(description="source file for --buckets")] = None,
    buckets: Annotated[bool, Switch()] = False,
    attention: Annotated[Optional[FilePath], Flag(description="attention dump of translate")] = None,
    report_dir: Annotated[Optional[Path], Flag(description="also write CSV reports here")] = None,
) -> int:
    """Score hypotheses: BLEU, optional length buckets and attention ratios."""
    if buckets:
        _require(src is not None, "--src", "--buckets needs --src")
    hypotheses = read_lines(hyp)
    references = read_lines(ref)
    report = corpus_bleu(hypotheses, references)
    print(format_bleu(report))
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        with open(report_dir / "bleu.csv", "w", encoding="utf-8") as stream:
            write_bleu_csv(report, stream)

    lengths: Optional[List[int]] = None
    if src is not None:
        lengths = [len(tokens) for tokens in tokenize_lines(read_lines(src))]
    if buckets:
        assert lengths is not None
        bucket_report = bucket_bleu(lengths, hypotheses, references)
        for bucket in bucket_report.buckets:
            score = "absent" if bucket.bleu is None else f"{bucket.bleu:.2f}"
            print(f"bucket {bucket.bucket:<6} sentences {bucket.sentences:<6} BLEU {score}")
        if report_dir is not None:
            with open(report_dir / "buckets.csv", "w", encoding="utf-8") as stream:
                write_bucket_csv(bucket_report, stream)

    if attention is not None:
        records = read_attention(attention)
        ratios = attention_ratio(records)
        print(f"attention ratio (phrases/words): mean {ratios.mean:.4f} over {len(records)} sentences")
        for name, value in bucket_attention_ratio(records, lengths).items():
            print(f"ratio {name:<6} {'absent' if value is None else f'{value:.4f}'}")
        if report_dir is not None:
            with open(report_dir / "attention_ratio.csv", "w", encoding="utf-8") as stream:
                write_ratio_csv(ratios, stream)
    return EXIT_OK


@command
def cmd_check(
    seed: Annotated[int, Flag(ge=0)] = 0,
    trials: Annotated[int, Flag(gt=0)] = 6,
    forest_trials: Annotated[int, Flag(gt=0)] = 20,
    corrupt: Annotated[Optional[str], Flag(description="debug: perturb this parameter's gradient")] = None,
) -> int:
    """Run the gradient-check and forest-oracle suites on random small instances."""
    reports = [
        gradient_suite(seed, trials, corrupt=corrupt),
        forest_oracle_suite(seed, forest_trials),
    ]
    for report in reports:
        status = "ok" if report.passed else f"{len(report.failures)} FAILED"
        print(f"{report.suite}: {len(report.cases)} cases, {status}")
    for report in reports:
        failure = report.first_failure
        if failure is not None:
            worst = failure.detail.get("worst_param")
            where = f" (parameter {worst})" if worst else ""
            raise CheckFailure(
                [
                    error_detail(
                        "check_failed",
                        f"{failure.suite} case {failure.name} failed in trial {failure.trial}{where}",
                        loc=(failure.suite, failure.trial),
                        input=failure.model_dump(),
                    )
                ]
            )
    return EXIT_OK


@command
def cmd_compare(
    data: Annotated[DirectoryPath, Flag(description="train/dev files written by generate --kind synthetic")],
    seeds: Annotated[int, Flag(gt=0)] = 3,
    hidden: Annotated[int, Flag(gt=0)] = 16,
    embed: Annotated[int, Flag(gt=0)] = 16,
    lr: Annotated[float, Flag(ge=0)] = 0.5,
    batch: Annotated[int, Flag(gt=0)] = 8,
    epochs: Annotated[int, Flag(gt=0)] = 10,
    patience: Annotated[int, Flag(ge=0, description="0 never stops early")] = 2,
    min_freq: Annotated[int, Flag(gt=0)] = 1,
    tolerance: Annotated[float, Flag(ge=0, description="accepted relative perplexity reversal")] = TIE_TOLERANCE,
    report: Annotated[Optional[Path], Flag(description="per-run CSV")] = None,
) -> int:
    """Train every mode over several seeds and check forest <= tree <= vanilla dev perplexity."""
    splits = {}
    for split in ("train", "dev"):
        paths = [data / f"{split}.{kind}" for kind in ("src", "tgt", "forest")]
        for path in paths:
            _require(path.is_file(), "--data", f"--data has no {path.name}")
        splits[split] = load_bitext(*paths, split=split)
    config = TrainConfig.build(
        hidden=hidden,
        embed=embed,
        lr=lr,
        batch_size=batch,
        max_epochs=epochs,
        patience=patience or None,
        min_freq=min_freq,
    )
    comparison = compare_modes(splits["train"], splits["dev"], config, range(seeds), tolerance=tolerance)
    for mode, mean in comparison.means().items():
        print(f"{mode:<8} mean dev perplexity {mean:.4f} over {seeds} seed(s)")
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
        with open(report, "w", encoding="utf-8") as stream:
            write_comparison_csv(comparison, stream)
    reversals = comparison.reversals()
    if reversals:
        raise CheckFailure(
            [
                error_detail(
                    "mode_order",
                    f"{richer} mode perplexity {comparison.mean(richer):.4f} exceeds "
                    f"{poorer} mode {comparison.mean(poorer):.4f} by more than {tolerance:.0%}",
                    loc=("compare", richer),
                    input=comparison.means(),
                )
                for richer, poorer in reversals
            ]
        )
    return EXIT_OK


@command
def cmd_vocab(
    src: Annotated[FilePath, Flag()],
    out: Annotated[Path, Flag()],
    min_freq: Annotated[int, Flag(gt=0)] = 5,
    lowercase: Annotated[bool, Switch()] = False,
) -> int:
    """Build a vocabulary file (token<TAB>count, most frequent first)."""
    vocab = build_vocab(tokenize_lines(read_lines(src), lowercase), min_freq)
    _write_atomic(out, "".join(line + "\n" for line in vocab.to_lines()))
    print(f"{len(vocab.words)} tokens (+4 reserved) -> {out}")
    return EXIT_OK


@command
def cmd_generate(
    out: Annotated[Path, Flag(description="output directory")],
    kind: Annotated[Literal["toy", "synthetic"], Flag()] = "toy",
    pairs: Annotated[int, Flag(gt=0)] = 500,
    ambiguity: Annotated[float, Flag(ge=0, le=1)] = 0.3,
    seed: Annotated[int, Flag(ge=0)] = 0,
) -> int:
    """Write the toy corpus or a synthetic train/dev/test corpus with forests."""
    if kind == "toy":
        corpus = make_toy_corpus(seed)
        for path in corpus.write(out, "toy").values():
            print(path)
        return EXIT_OK
    corpus = make_synthetic_corpus(pairs, ambiguity, seed)
    n_test = max(1, pairs // 10)
    sizes = [pairs - 2 * n_test, n_test, n_test]
    if sizes[0] < 1:
        raise ConfigError.single("too_small", "--pairs must be at least 3 for a synthetic split", loc=("flag", "--pairs"))
    for part in split_corpus(corpus, sizes):
        for path in part.write(out, part.bitext.split).values():
            print(path)
    return EXIT_OK


COMMANDS: Dict[str, CommandValidator] = {
    cmd.name: cmd
    for cmd in (cmd_train, cmd_translate, cmd_eval, cmd_check, cmd_compare, cmd_vocab, cmd_generate)
}

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

_handler: Optional[logging.Handler] = None


def configure_logging(level: str) -> None:
    global _handler
    package_logger = logging.getLogger("forest_nmt")
    if _handler is not None:
        package_logger.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(_handler)
    package_logger.setLevel(level)


def usage() -> str:
    lines = [
        "usage: forest-nmt [--log-level LEVEL] COMMAND [flags]",
        "",
        "commands:",
    ]
    for name, cmd in COMMANDS.items():
        summary = (cmd.__doc__ or "").strip().splitlines()
        lines.append(f"  {name:<10} {summary[0] if summary else ''}")
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    level = "WARNING"
    while args and args[0].startswith("--"):
        option, _, value = args.pop(0).partition("=")
        if option in ("--help", "-h"):
            print(usage())
            return EXIT_OK
        if option == "--version":
            print(__version__)
            return EXIT_OK
        if option == "--log-level":
            if not value and args:
                value = args.pop(0)
            if value.upper() not in LOG_LEVELS:
                sys.stderr.write(f"--log-level must be one of {', '.join(LOG_LEVELS)}\n")
                return EXIT_CONFIG
            level = value.upper()
            continue
        sys.stderr.write(f"unknown option {option}\n{usage()}\n")
        return EXIT_CONFIG
    if not args or args[0] not in COMMANDS:
        sys.stderr.write((f"unknown command {args[0]!r}\n" if args else "") + usage() + "\n")
        return EXIT_CONFIG
    configure_logging(level)
    cmd = COMMANDS[args[0]]
    if any(arg in ("--help", "-h") for arg in args[1:]):
        print(cmd.usage())
        return EXIT_OK
    return cmd(args[1:])


if __name__ == "__main__":
    sys.exit(main())
