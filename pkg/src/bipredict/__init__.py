"""Conversation coupling monitor built on token-frequency information metrics."""

from .exceptions import (
    BipredictError,
    ConvergenceError,
    ConversationError,
    DuplicateConversationError,
    InsufficientDataError,
    SnapshotError,
    TranscriptError,
    TurnOrderError,
    UndefinedStatisticError,
    UnknownConversationError,
)
from .idt import (
    BaselineModel,
    ConversationState,
    DetectionReport,
    DeviationFlag,
    IDTConfig,
    Monitor,
    TrendResult,
    detect_phase,
    detect_trend,
    init_conversation,
    learn_baseline,
    process_turn,
    track_recovery,
)
from .infometrics import TurnMetrics, compute_turn_metrics, delta_h_of, p_of
from .stats_kernel import cohens_d, pearson, student_t_sf, welch_t_test
from .token_stats import (
    EntropyAccumulator,
    TokenBag,
    Tokenizer,
    TokenizerSpec,
    acc_add,
    bag_from_tokens,
    entropy,
    pooled_entropy,
    tokenize,
)

__version__ = "0.1.0"
