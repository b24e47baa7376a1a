"""Forest-to-sequence neural machine translation"""

from .command import command as command
from .corpus import Bitext as Bitext
from .corpus import SentencePair as SentencePair
from .corpus import Vocabulary as Vocabulary
from .corpus import build_vocab as build_vocab
from .corpus import load_bitext as load_bitext
from .corpus import load_sources as load_sources
from .decoder import AttentionRecord as AttentionRecord
from .decoder import greedy_decode as greedy_decode
from .encoder import encode_source as encode_source
from .evaluation import attention_ratio as attention_ratio
from .evaluation import bucket_bleu as bucket_bleu
from .evaluation import corpus_bleu as corpus_bleu
from .evaluation import perplexity as perplexity
from .exception_handlers import exception_handler as exception_handler
from .exception_handlers import handle_exception as handle_exception
from .exceptions import ConfigError as ConfigError
from .exceptions import ContractError as ContractError
from .exceptions import DataError as DataError
from .exceptions import ForestFormatError as ForestFormatError
from .exceptions import ForestNMTError as ForestNMTError
from .exceptions import NumericError as NumericError
from .flag_functions import Flag as Flag
from .flag_functions import Switch as Switch
from .forest import PackedForest as PackedForest
from .forest import SpanTree as SpanTree
from .forest import parse_forest as parse_forest
from .forest import tree_count as tree_count
from .model import NMTModel as NMTModel
from .train import TrainConfig as TrainConfig
from .train import load_checkpoint as load_checkpoint
from .train import save_checkpoint as save_checkpoint
from .train import train as train

__version__ = "0.1.0"
