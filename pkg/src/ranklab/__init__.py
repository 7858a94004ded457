"""ranklab: a desk-scale lab for long-document neural ranking.

Tokenize, chunk, encode and aggregate query-document pairs with a small
numpy transformer, train rankers pairwise, evaluate them over seeds, and
measure where relevant passages sit inside relevant documents. See README.md.
"""

from ranklab._config import configure, get_config
from ranklab.aggregators import AggregatorConfig
from ranklab.chunking import ChunkingConfig, assemble, greedy_partition, sliding_window
from ranklab.encoder import AttentionPattern, EncoderConfig, encode
from ranklab.evaluation import (
    Judgments,
    MetricReport,
    RankedList,
    average_precision,
    mrr,
    ndcg,
    paired_significance,
)
from ranklab.exceptions import (
    AnalysisError,
    ConfigError,
    DataError,
    ExperimentFailed,
    RanklabError,
    TrainingDiverged,
)
from ranklab.experiment import emit_report, load_experiment, run_experiment
from ranklab.position_analysis import (
    build_histograms,
    chunk_index,
    estimate_ceiling,
    match_passage,
)
from ranklab.ranker import ModelSpec, Ranker
from ranklab.synthetic import SyntheticSpec, generate_synthetic
from ranklab.tokenize import Vocab, build_vocab, prepare_query, tokenize
from ranklab.training import TrainConfig, lr_multiplier, train

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "configure",
    "get_config",
    "Vocab",
    "build_vocab",
    "tokenize",
    "prepare_query",
    "ChunkingConfig",
    "greedy_partition",
    "sliding_window",
    "assemble",
    "AttentionPattern",
    "EncoderConfig",
    "encode",
    "AggregatorConfig",
    "ModelSpec",
    "Ranker",
    "TrainConfig",
    "lr_multiplier",
    "train",
    "Judgments",
    "RankedList",
    "MetricReport",
    "mrr",
    "ndcg",
    "average_precision",
    "paired_significance",
    "match_passage",
    "chunk_index",
    "build_histograms",
    "estimate_ceiling",
    "SyntheticSpec",
    "generate_synthetic",
    "load_experiment",
    "run_experiment",
    "emit_report",
    "RanklabError",
    "ConfigError",
    "DataError",
    "TrainingDiverged",
    "AnalysisError",
    "ExperimentFailed",
]
