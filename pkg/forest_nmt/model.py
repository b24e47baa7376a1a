import logging
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from forest_nmt.corpus import SentencePair, Vocabulary
from forest_nmt.decoder import (
    AttentionRecord,
    decoder_param_shapes,
    greedy_decode,
    sentence_loss,
)
from forest_nmt.encoder import (
    MODES,
    EncodedSource,
    Mode,
    Shapes,
    encode_source,
    encoder_param_shapes,
)
from forest_nmt.exceptions import ConfigError, ContractError, DimensionError, ErrorList, error_detail
from forest_nmt.forest import PackedForest, SpanTree
from forest_nmt.numcore import Tensor, parameter

logger = logging.getLogger(__name__)


def param_shapes(mode: Mode, src_vocab: int, tgt_vocab: int, embed: int, hidden: int) -> Shapes:
    if mode not in MODES:
        raise ConfigError.single(
            "literal_error", f"mode must be one of {MODES}, got {mode!r}", loc=("config", "mode"), input=mode
        )
    shapes = encoder_param_shapes(mode, src_vocab, embed, hidden)
    shapes.update(decoder_param_shapes(mode, tgt_vocab, embed, hidden))
    return shapes


class ModelParams(Mapping[str, Tensor]):
    def __init__(self, tensors: Mapping[str, Tensor]) -> None:
        self._tensors: Dict[str, Tensor] = {name: tensors[name] for name in sorted(tensors)}

    @classmethod
    def initialize(cls, shapes: Shapes, seed: int, scale: float = 0.08) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(
            {
                name: parameter(rng.uniform(-scale, scale, size=shapes[name]), name=name)
                for name in sorted(shapes)
            }
        )

    @classmethod
    def zeros(cls, shapes: Shapes) -> "ModelParams":
        return cls({name: parameter(np.zeros(shape), name=name) for name, shape in shapes.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.num_values()} values)"

    def num_values(self) -> int:
        return sum(tensor.size for tensor in self._tensors.values())

    def shapes(self) -> Shapes:
        return {name: tensor.shape for name, tensor in self._tensors.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        errors: ErrorList = [
            error_detail("missing", f"parameter {name} missing", loc=("params", name))
            for name in sorted(set(self._tensors) - set(arrays))
        ]
        errors.extend(
            error_detail("extra_forbidden", f"unexpected parameter {name}", loc=("params", name))
            for name in sorted(set(arrays) - set(self._tensors))
        )
        for name, tensor in self._tensors.items():
            if name in arrays and np.shape(arrays[name]) != tensor.shape:
                errors.append(
                    error_detail(
                        "shape_mismatch",
                        f"parameter {name}: expected shape {tensor.shape}, got {np.shape(arrays[name])}",
                        loc=("params", name),
                        input=list(np.shape(arrays[name])),
                    )
                )
        if errors:
            raise DimensionError(errors)
        for name, tensor in self._tensors.items():
            tensor.data[...] = arrays[name]

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()


Structure = Union[PackedForest, SpanTree, None]


class NMTModel:
    def __init__(
        self,
        mode: Mode,
        params: ModelParams,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> None:
        self.mode = mode
        self.params = params
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab

    @classmethod
    def create(
        cls,
        mode: Mode,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        *,
        embed: int,
        hidden: int,
        seed: int,
        init_scale: float = 0.08,
    ) -> "NMTModel":
        shapes = param_shapes(mode, len(src_vocab), len(tgt_vocab), embed, hidden)
        params = ModelParams.initialize(shapes, seed, init_scale)
        logger.info("%s model: %d tensors, %d parameters", mode, len(params), params.num_values())
        return cls(mode, params, src_vocab, tgt_vocab)

    @property
    def hidden(self) -> int:
        return self.params["enc.seq.U_i"].shape[0]

    @property
    def embed(self) -> int:
        return self.params["enc.E_x"].shape[1]

    def encode(self, source: Sequence[int], structure: Structure) -> EncodedSource:
        return encode_source(source, structure, self.params, self.mode)

    def encode_pair(self, pair: SentencePair) -> Tuple[EncodedSource, List[int]]:
        source = self.src_vocab.encode(pair.source)
        target = self.tgt_vocab.encode(pair.target, add_eos=True)
        return self.encode(source, pair.structure(self.mode)), target

    def loss(self, pair: SentencePair) -> Tensor:
        encoded, target = self.encode_pair(pair)
        return sentence_loss(encoded, target, self.params)

    def translate(
        self, pair: SentencePair, max_len: Optional[int] = None
    ) -> Tuple[List[str], AttentionRecord]:
        if not pair.source:
            raise ContractError.single("empty_source", "cannot translate an empty sentence", loc=("line", pair.line))
        encoded = self.encode(self.src_vocab.encode(pair.source), pair.structure(self.mode))
        ids, record = greedy_decode(encoded, self.params, max_len)
        return self.tgt_vocab.decode(ids), record
