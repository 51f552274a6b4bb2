"""Collaborative edge inference with key-query semantic grouping.

Devices run a split classifier, multicast learned queries, build a pruned
attention-based communication graph and fuse intermediate features received
over a packet-erasure sidelink.
"""
from .backbone import SplitClassifier, SplitModel, pretrain
from .channel import ErasureChannelCfg, TransmissionRecord, segment, transmit
from .errors import CollabError, ConfigError, DomainError, SchemaError, ShapeError, StateError, TrainingError
from .pipeline import CollaborativeClassifier, PipelineCfg, RoundMetrics, evaluate, infer_round, train_comm
from .scenario import ScenarioCfg, build_round, gen_dataset
from .semgroup import CommModules, MatchingMatrix, build_matrix, combine, count_connections, match_score, prune

__version__ = "0.1.0"

__all__ = [
    "SplitClassifier", "SplitModel", "pretrain",
    "ErasureChannelCfg", "TransmissionRecord", "segment", "transmit",
    "CollabError", "ConfigError", "DomainError", "SchemaError", "ShapeError", "StateError",
    "TrainingError",
    "CollaborativeClassifier", "PipelineCfg", "RoundMetrics", "evaluate", "infer_round",
    "train_comm",
    "ScenarioCfg", "build_round", "gen_dataset",
    "CommModules", "MatchingMatrix", "build_matrix", "combine", "count_connections",
    "match_score", "prune",
]
