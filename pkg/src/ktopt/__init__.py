"""Correction of noisy student interaction records and its evaluation.

The toolkit reads interaction logs, flags response pairs that contradict
question difficulty or local performance, repairs them through an exact
discounted-cost dynamic program, pretrains question/skill embeddings on
relation graphs, and measures the downstream effect with a small
recurrent response predictor.  The ``ktopt`` command line drives the
whole pipeline; the modules below are usable on their own.
"""

from .detect import CoherenceParams, ContinuityParams, ControlDecision, control_value
from .dpopt import (DpParams, OptimizedSeq, PartitionParams, brute_force_oracle,
                    optimize_student, solve_bellman, violations)
from .ingest import (Dataset, Interaction, StudentSequence, load_dataset,
                     parse_dataset, save_dataset, split_train_test)
from .optim import Adam, TrainingDivergedError
from .predict import (FusionParams, Metrics, Model, PredictorParams, auc_score,
                      evaluate, train_predictor)
from .pretrain import (EmbeddingSet, PretrainParams, RelationGraphs,
                       build_graphs, load_embeddings, save_embeddings,
                       train_embeddings)
from .stats import (DifficultyTable, SequenceIndex, StateDifficultySeq,
                    compute_difficulty, interval_performance)
from .synth import RecoveryReport, SynthConfig, generate, score_recovery

__version__ = "0.1.0"

__all__ = [
    "Adam", "CoherenceParams", "ContinuityParams", "ControlDecision",
    "Dataset", "DifficultyTable", "DpParams", "EmbeddingSet", "FusionParams",
    "Interaction", "Metrics", "Model", "OptimizedSeq", "PartitionParams",
    "PredictorParams", "PretrainParams", "RecoveryReport", "RelationGraphs",
    "SequenceIndex", "StateDifficultySeq", "StudentSequence", "SynthConfig",
    "TrainingDivergedError", "auc_score", "brute_force_oracle",
    "build_graphs", "compute_difficulty", "control_value", "evaluate",
    "generate", "interval_performance", "load_dataset", "load_embeddings",
    "optimize_student", "parse_dataset", "save_dataset", "save_embeddings",
    "score_recovery", "solve_bellman", "split_train_test", "train_embeddings",
    "train_predictor", "violations", "__version__",
]
