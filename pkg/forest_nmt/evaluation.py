import csv
import logging
import math
from typing import IO, Dict, List, NamedTuple, Optional, Sequence

from pydantic import BaseModel
from sacrebleu.metrics import BLEU

from forest_nmt.corpus import Bitext
from forest_nmt.decoder import AttentionRecord, step_log_probs
from forest_nmt.exceptions import AlignmentError, ContractError, DataError
from forest_nmt.model import NMTModel
from forest_nmt.numcore import no_grad

logger = logging.getLogger(__name__)

MAX_ORDER = 4


class Bucket(NamedTuple):
    name: str
    lower: int
    upper: Optional[int]

    def holds(self, length: int) -> bool:
        return self.lower <= length and (self.upper is None or length <= self.upper)


BUCKETS = (Bucket("<=10", 0, 10), Bucket("11-20", 11, 20), Bucket(">20", 21, None))


def bucket_of(length: int) -> Bucket:
    return next(bucket for bucket in BUCKETS if bucket.holds(length))


class BleuReport(BaseModel):
    bleu: float
    precisions: List[float]
    counts: List[int]
    totals: List[int]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    @property
    def ratio(self) -> float:
        return self.hyp_len / self.ref_len if self.ref_len else 0.0


_scorer = BLEU(tokenize="none", smooth_method="none", force=True)


def _check_aligned(hypotheses: Sequence[str], references: Sequence[str]) -> None:
    if len(hypotheses) != len(references):
        raise AlignmentError.single(
            "line_count_mismatch",
            f"{len(hypotheses)} hypotheses for {len(references)} references",
            loc=("hypotheses",),
            input={"hypotheses": len(hypotheses), "references": len(references)},
        )


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> BleuReport:
    """Corpus BLEU on already tokenized, space-joined lines.

    No smoothing: an n-gram order with no matches (or no n-grams at all)
    scores 0.
    """
    _check_aligned(hypotheses, references)
    if not hypotheses:
        raise DataError.single("empty_corpus", "cannot score an empty corpus", loc=("hypotheses",))
    score = _scorer.corpus_score(list(hypotheses), [list(references)])
    precisions = [
        count / total if total else 0.0 for count, total in zip(score.counts, score.totals)
    ]
    if score.score == 0.0 and score.sys_len:
        logger.warning(
            "BLEU is zero: no matching n-grams for order(s) %s",
            [n + 1 for n, p in enumerate(precisions) if p == 0.0],
        )
    return BleuReport(
        bleu=float(score.score),
        precisions=precisions,
        counts=list(score.counts),
        totals=list(score.totals),
        brevity_penalty=float(score.bp),
        hyp_len=int(score.sys_len),
        ref_len=int(score.ref_len),
    )


def format_bleu(report: BleuReport) -> str:
    precisions = "/".join(f"{100 * p:.1f}" for p in report.precisions)
    return (
        f"BLEU = {report.bleu:.2f}, {precisions} (BP={report.brevity_penalty:.3f}, "
        f"ratio={report.ratio:.3f}, hyp_len={report.hyp_len}, ref_len={report.ref_len})"
    )


class BucketScore(BaseModel):
    bucket: str
    sentences: int
    bleu: Optional[float] = None


class BucketReport(BaseModel):
    buckets: List[BucketScore]

    def score(self, name: str) -> Optional[float]:
        return next(bucket.bleu for bucket in self.buckets if bucket.bucket == name)


def bucket_bleu(
    source_lengths: Sequence[int], hypotheses: Sequence[str], references: Sequence[str]
) -> BucketReport:
    _check_aligned(hypotheses, references)
    if len(source_lengths) != len(hypotheses):
        raise AlignmentError.single(
            "line_count_mismatch",
            f"{len(source_lengths)} sources for {len(hypotheses)} hypotheses",
            loc=("sources",),
        )
    scores = []
    for bucket in BUCKETS:
        members = [i for i, length in enumerate(source_lengths) if bucket.holds(length)]
        if not members:
            scores.append(BucketScore(bucket=bucket.name, sentences=0))
            continue
        report = corpus_bleu([hypotheses[i] for i in members], [references[i] for i in members])
        scores.append(BucketScore(bucket=bucket.name, sentences=len(members), bleu=report.bleu))
    return BucketReport(buckets=scores)


class RatioReport(BaseModel):
    per_sentence: List[float]
    mean: float


def sentence_ratio(record: AttentionRecord) -> float:
    if record.mode == "vanilla":
        raise ContractError.single(
            "vanilla_record", "vanilla-mode attention has no phrase part", loc=("attention_ratio",)
        )
    word_mass = record.word_mass()
    if word_mass <= 0.0:
        raise ContractError.single("no_word_mass", "record has no attention on words", loc=("attention_ratio",))
    return record.phrase_mass() / word_mass


def attention_ratio(records: Sequence[AttentionRecord]) -> RatioReport:
    if not records:
        raise DataError.single("no_records", "no attention records", loc=("attention_ratio",))
    ratios = [sentence_ratio(record) for record in records]
    return RatioReport(per_sentence=ratios, mean=sum(ratios) / len(ratios))


def bucket_attention_ratio(
    records: Sequence[AttentionRecord], source_lengths: Optional[Sequence[int]] = None
) -> Dict[str, Optional[float]]:
    lengths = list(source_lengths) if source_lengths is not None else [r.n_words for r in records]
    if len(lengths) != len(records):
        raise AlignmentError.single(
            "line_count_mismatch", f"{len(lengths)} lengths for {len(records)} records", loc=("attention_ratio",)
        )
    grouped: Dict[str, List[float]] = {bucket.name: [] for bucket in BUCKETS}
    for record, length in zip(records, lengths):
        grouped[bucket_of(length).name].append(sentence_ratio(record))
    return {name: (sum(values) / len(values) if values else None) for name, values in grouped.items()}


def perplexity(model: NMTModel, split: Bitext) -> float:
    if not len(split):
        raise DataError.single("empty_split", "perplexity of an empty split", loc=("bitext", split.split))
    total_nll = 0.0
    tokens = 0
    with no_grad():
        for pair in split:
            encoded, target = model.encode_pair(pair)
            total_nll -= sum(step_log_probs(encoded, target, model.params))
            tokens += len(target)
    return math.exp(total_nll / tokens)


def write_bleu_csv(report: BleuReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["bleu", *[f"p{n}" for n in range(1, MAX_ORDER + 1)], "bp", "ratio", "hyp_len", "ref_len"])
    writer.writerow(
        [
            f"{report.bleu:.4f}",
            *[f"{p:.6f}" for p in report.precisions],
            f"{report.brevity_penalty:.6f}",
            f"{report.ratio:.6f}",
            report.hyp_len,
            report.ref_len,
        ]
    )


def write_bucket_csv(report: BucketReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["bucket", "sentences", "bleu"])
    for bucket in report.buckets:
        writer.writerow([bucket.bucket, bucket.sentences, "" if bucket.bleu is None else f"{bucket.bleu:.4f}"])


def write_ratio_csv(report: RatioReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["sentence", "ratio"])
    for index, ratio in enumerate(report.per_sentence, start=1):
        writer.writerow([index, f"{ratio:.6f}"])
    writer.writerow(["mean", f"{report.mean:.6f}"])
