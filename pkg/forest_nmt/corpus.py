import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Dict,
    Iterable,
    Iterator,
    List,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from forest_nmt.exceptions import (
    AlignmentError,
    ContractError,
    DataError,
    ForestFormatError,
    ErrorList,
    error_detail,
)
from forest_nmt.forest import (
    PackedForest,
    SpanTree,
    best_tree,
    parse_bracketed,
    parse_forest_block,
    split_forest_blocks,
)

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)

Split = Literal["train", "dev", "test"]
PathLike = Union[str, Path]


class Vocabulary:
    def __init__(self, tokens: Iterable[str], counts: Optional[Mapping[str, int]] = None) -> None:
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {token: index for index, token in enumerate(RESERVED)}
        for token in tokens:
            if token in self.stoi:
                raise ContractError.single(
                    "duplicate_token", f"token {token!r} listed twice", loc=("vocabulary",), input=token
                )
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        self.counts: Dict[str, int] = dict(counts or {})

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: object) -> bool:
        return token in self.stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    @property
    def words(self) -> List[str]:
        return self.itos[len(RESERVED) :]

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, index: int) -> str:
        return self.itos[index]

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> List[int]:
        ids = [self.lookup(token) for token in tokens]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]

    def to_lines(self) -> List[str]:
        return [f"{token}\t{self.counts.get(token, 0)}" for token in self.words]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        tokens: List[str] = []
        counts: Dict[str, int] = {}
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            token, _, count = line.rstrip("\n").partition("\t")
            try:
                counts[token] = int(count) if count else 0
            except ValueError:
                raise DataError.single(
                    "bad_count", f"vocabulary line {number} has a non-integer count", loc=("line", number), input=line
                ) from None
            tokens.append(token)
        return cls(tokens, counts)


def build_vocab(sentences: Iterable[Sequence[str]], min_freq: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_freq`` times.

    Ids follow descending frequency; ties keep first-occurrence order.
    """
    counts: Counter = Counter()
    first_seen: Dict[str, int] = {}
    n_sentences = 0
    for sentence in sentences:
        n_sentences += 1
        for token in sentence:
            counts[token] += 1
            first_seen.setdefault(token, len(first_seen))
    if not counts:
        raise DataError.single("empty_corpus", "cannot build a vocabulary from an empty corpus", loc=("corpus",))
    kept = sorted(
        (token for token, count in counts.items() if count >= min_freq and token not in RESERVED),
        key=lambda token: (-counts[token], first_seen[token]),
    )
    logger.info(
        "vocabulary: %d of %d types kept (min_freq=%d, %d sentences)",
        len(kept),
        len(counts),
        min_freq,
        n_sentences,
    )
    return Vocabulary(kept, {token: counts[token] for token in kept})


@dataclass(frozen=True)
class SentencePair:
    source: Tuple[str, ...]
    target: Tuple[str, ...]
    forest: Optional[PackedForest] = None
    tree: Optional[SpanTree] = None
    line: int = 0

    def structure(self, mode: str) -> Union[PackedForest, SpanTree, None]:
        """Source structure the encoder of ``mode`` consumes.

        Tree mode prefers an explicit tree and otherwise takes the 1-best
        derivation of the forest.
        """
        if mode == "vanilla":
            return None
        if mode == "tree":
            if self.tree is not None:
                return self.tree
            if self.forest is not None:
                return best_tree(self.forest)
        elif self.forest is not None:
            return self.forest
        raise ContractError.single(
            "missing_structure",
            f"{mode} mode needs {'a tree or forest' if mode == 'tree' else 'a forest'} for line {self.line}",
            loc=("line", self.line),
        )


@dataclass
class Bitext:
    pairs: List[SentencePair]
    split: Split = "train"
    dropped: int = 0
    sources_path: Optional[str] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[SentencePair]:
        return iter(self.pairs)

    def __getitem__(self, index: int) -> SentencePair:
        return self.pairs[index]

    def sources(self) -> List[Tuple[str, ...]]:
        return [pair.source for pair in self.pairs]

    def targets(self) -> List[Tuple[str, ...]]:
        return [pair.target for pair in self.pairs]

    def source_lengths(self) -> List[int]:
        return [len(pair.source) for pair in self.pairs]

    @property
    def has_forests(self) -> bool:
        return bool(self.pairs) and all(pair.forest is not None for pair in self.pairs)

    @property
    def has_trees(self) -> bool:
        return bool(self.pairs) and all(pair.tree is not None for pair in self.pairs)

    def check_binary_trees(self) -> None:
        errors: ErrorList = []
        for pair in self.pairs:
            tree = pair.structure("tree")
            if isinstance(tree, SpanTree) and not tree.is_binary():
                errors.append(
                    error_detail(
                        "non_binary_tree",
                        f"line {pair.line}: tree mode needs binary trees",
                        loc=("line", pair.line),
                    )
                )
        if errors:
            raise DataError(errors)


def read_lines(path: PathLike) -> List[str]:
    try:
        with open(path, encoding="utf-8") as handle:
            return handle.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError.single("unreadable_file", f"cannot read {path}: {exc}", loc=("file", str(path))) from None


def read_text(path: PathLike) -> str:
    return "\n".join(read_lines(path))


def tokenize_lines(lines: Iterable[str], lowercase: bool = False) -> List[Tuple[str, ...]]:
    return [tuple((line.lower() if lowercase else line).split()) for line in lines]


def _read_structures(
    forest_path: Optional[PathLike], tree_path: Optional[PathLike], counts: Dict[str, int]
) -> Tuple[Optional[List[List[Tuple[int, str]]]], Optional[List[str]]]:
    blocks = None
    if forest_path is not None:
        blocks = split_forest_blocks(read_text(forest_path))
        counts["forest"] = len(blocks)
    tree_lines = None
    if tree_path is not None:
        tree_lines = read_lines(tree_path)
        counts["tree"] = len(tree_lines)
    return blocks, tree_lines


def _check_aligned(counts: Dict[str, int], split: str) -> None:
    if len(set(counts.values())) != 1:
        raise AlignmentError.single(
            "line_count_mismatch",
            "input files are not line-aligned: "
            + ", ".join(f"{name}={count}" for name, count in counts.items()),
            loc=("bitext", split),
            input=counts,
        )


def _pair(
    index: int,
    source: Tuple[str, ...],
    target: Tuple[str, ...],
    blocks: Optional[List[List[Tuple[int, str]]]],
    tree_lines: Optional[List[str]],
    errors: ErrorList,
) -> Optional[SentencePair]:
    line = index + 1
    if not source:
        errors.append(error_detail("empty_source", f"line {line}: empty source sentence", loc=("line", line)))
        return None
    forest = None
    if blocks is not None:
        forest = parse_forest_block(blocks[index])
        if forest.sentence_len != len(source):
            errors.append(
                error_detail(
                    "length_mismatch",
                    f"line {line}: forest covers {forest.sentence_len} words, source has {len(source)}",
                    loc=("line", line),
                    input=forest.sentence_len,
                )
            )
            return None
    tree = None
    if tree_lines is not None:
        try:
            tree, words = parse_bracketed(tree_lines[index])
        except ForestFormatError as exc:
            errors.extend({**error, "loc": ("line", line, *error["loc"])} for error in exc.errors)
            return None
        if len(words) != len(source):
            errors.append(
                error_detail(
                    "length_mismatch",
                    f"line {line}: tree covers {len(words)} words, source has {len(source)}",
                    loc=("line", line),
                    input=len(words),
                )
            )
            return None
    return SentencePair(source, target, forest, tree, line)


def load_bitext(
    src_path: PathLike,
    tgt_path: PathLike,
    forest_path: Optional[PathLike] = None,
    *,
    tree_path: Optional[PathLike] = None,
    max_len: int = 50,
    split: Split = "train",
    lowercase: bool = False,
) -> Bitext:
    """Load line-aligned source/target files with optional forests or trees.

    Pairs where either side is longer than ``max_len`` are dropped together
    with their forest block or tree line. Forests are only parsed for kept
    pairs.
    """
    sources = tokenize_lines(read_lines(src_path), lowercase)
    targets = tokenize_lines(read_lines(tgt_path), lowercase)
    counts = {"source": len(sources), "target": len(targets)}
    blocks, tree_lines = _read_structures(forest_path, tree_path, counts)
    _check_aligned(counts, split)

    pairs: List[SentencePair] = []
    errors: ErrorList = []
    dropped = 0
    for index, (source, target) in enumerate(zip(sources, targets)):
        if len(source) > max_len or len(target) > max_len:
            dropped += 1
            continue
        pair = _pair(index, source, target, blocks, tree_lines, errors)
        if pair is not None:
            pairs.append(pair)
    if errors:
        raise DataError(errors)
    logger.info(
        "%s bitext %s: kept %d pairs, dropped %d longer than %d tokens",
        split,
        src_path,
        len(pairs),
        dropped,
        max_len,
    )
    return Bitext(pairs, split, dropped, str(src_path))


def load_sources(
    src_path: PathLike,
    forest_path: Optional[PathLike] = None,
    *,
    tree_path: Optional[PathLike] = None,
    lowercase: bool = False,
) -> Bitext:
    sources = tokenize_lines(read_lines(src_path), lowercase)
    counts = {"source": len(sources)}
    blocks, tree_lines = _read_structures(forest_path, tree_path, counts)
    _check_aligned(counts, "test")
    errors: ErrorList = []
    pairs = [_pair(index, source, (), blocks, tree_lines, errors) for index, source in enumerate(sources)]
    if errors:
        raise DataError(errors)
    logger.info("loaded %d source sentences from %s", len(pairs), src_path)
    return Bitext([pair for pair in pairs if pair is not None], "test", 0, str(src_path))
