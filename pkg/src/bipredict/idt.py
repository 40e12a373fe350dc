"""Per-conversation monitor ("information digital twin").

One :class:`ConversationState` per conversation holds the growing context
accumulator, the metric history, a baseline learned from the first turns
and any deviation flags. Three detectors run over the history:

* phase comparison: baseline-window values against chosen injection turns
  (two-sample t-test plus a directional-consistency check), combined by
  logical OR into a union verdict;
* streaming deviation: per-turn z-scores against the frozen baseline;
* trend: Pearson correlation of a metric with the turn index.

:class:`Monitor` is the multi-conversation registry used by the CLI and
the HTTP service.
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .exceptions import (
    ConversationError,
    DuplicateConversationError,
    InsufficientDataError,
    TurnOrderError,
    UndefinedStatisticError,
    UnknownConversationError,
)
from .infometrics import DETECTOR_METRICS, TurnMetrics, canonical_metric, compute_turn_metrics
from .stats_kernel import CorrelationResult, TTestResult, cohens_d, pearson, welch_t_test
from .token_stats import EntropyAccumulator, TokenBag, TokenizerSpec, tokenize

DIRECTION_MODES = ("uniform", "expected")


@dataclass
class IDTConfig:
    """Detector and baseline settings for one conversation.

    ``direction_mode="uniform"`` requires every injection value to sit on
    the same side of the baseline mean; ``"expected"`` (the default) also
    requires the shift to match ``expected_directions`` for metrics listed
    there. Hf shrinks roughly like 1/|S| as the context grows, so in
    uniform mode a late-vs-early comparison picks up that drift on
    unperturbed conversations.
    """

    baseline_window: tuple = (1, 30)
    band_k: float = 2.0
    z_threshold: float = 3.0
    streaming: bool = True
    monitored_metrics: tuple = DETECTOR_METRICS
    alpha: float = 0.05
    equal_var: bool = False
    direction_mode: str = "expected"
    expected_directions: dict = field(default_factory=lambda: {"P": -1, "Hf": 1, "Hb": 1, "dH": -1})
    trend_min_window: int = 50
    trend_directions: dict = field(default_factory=lambda: {"P": -1})
    recovery_k_max: int = 5

    def __post_init__(self):
        lo, hi = self.baseline_window
        self.baseline_window = (int(lo), int(hi))
        if not 1 <= self.baseline_window[0] <= self.baseline_window[1]:
            raise ValueError(f"invalid baseline window {self.baseline_window}")
        if self.direction_mode not in DIRECTION_MODES:
            raise ValueError(f"direction_mode must be one of {DIRECTION_MODES}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.monitored_metrics = tuple(canonical_metric(m) for m in self.monitored_metrics)
        self.expected_directions = {canonical_metric(k): int(v) for k, v in self.expected_directions.items()}
        self.trend_directions = {canonical_metric(k): int(v) for k, v in self.trend_directions.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["baseline_window"] = list(self.baseline_window)
        d["monitored_metrics"] = list(self.monitored_metrics)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "IDTConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class BaselineModel:
    window: tuple
    mean: dict
    std: dict
    k: float = 2.0

    def band(self, metric: str) -> tuple[float, float]:
        m = canonical_metric(metric)
        return self.mean[m] - self.k * self.std[m], self.mean[m] + self.k * self.std[m]

    def contains(self, metric: str, value: float) -> bool:
        lo, hi = self.band(metric)
        return lo <= value <= hi

    def z(self, metric: str, value: float) -> float:
        m = canonical_metric(metric)
        diff = value - self.mean[m]
        sd = self.std[m]
        if sd > 0:
            return diff / sd
        if diff == 0:
            return 0.0
        return math.copysign(math.inf, diff)

    def to_dict(self) -> dict:
        return {"window": list(self.window), "mean": dict(self.mean), "std": dict(self.std), "k": self.k}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BaselineModel":
        return cls(tuple(d["window"]), dict(d["mean"]), dict(d["std"]), d["k"])


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    m = math.fsum(values) / n
    if n < 2:
        return m, 0.0
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / (n - 1))


def fit_baseline(history: Sequence[TurnMetrics], window: tuple, k: float = 2.0) -> BaselineModel:
    """Per-metric mean and sample std over the turns inside ``window``."""
    lo, hi = window
    rows = [m for m in history if lo <= m.turn_index <= hi]
    if len(rows) != hi - lo + 1:
        raise InsufficientDataError(
            f"baseline window {lo}-{hi} not covered: history has {len(history)} turns"
        )
    mean, std = {}, {}
    for metric in DETECTOR_METRICS:
        mean[metric], std[metric] = _mean_std([r.get(metric) for r in rows])
    return BaselineModel((lo, hi), mean, std, k)


@dataclass
class DeviationFlag:
    turn_index: int
    metric: str
    z_score: float
    direction: int
    recovered_at: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricDetection:
    metric: str
    ttest: TTestResult
    cohens_d: float
    consistent: bool
    detected: bool


@dataclass(frozen=True)
class DetectionReport:
    metrics: dict
    union_detected: bool
    injection_turns: tuple
    baseline_window: tuple
    alpha: float

    def detected(self, metric: str) -> bool:
        return self.metrics[canonical_metric(metric)].detected

    def rows(self) -> list[dict]:
        out = []
        for name, det in self.metrics.items():
            out.append({
                "metric": name,
                "t": det.ttest.t,
                "df": det.ttest.df,
                "p": det.ttest.p_two_sided,
                "cohens_d": det.cohens_d,
                "baseline_mean": det.ttest.mean_a,
                "injection_mean": det.ttest.mean_b,
                "direction": det.ttest.direction,
                "consistent": det.consistent,
                "detected": det.detected,
            })
        return out


def directional_consistency(baseline_mean: float, values: Sequence[float], expected: int | None = None) -> bool:
    """True when every value deviates from ``baseline_mean`` in the same
    direction as the overall mean shift (and, if given, in ``expected``)."""
    shift = math.fsum(values) / len(values) - baseline_mean
    if shift == 0:
        return False
    sign = 1 if shift > 0 else -1
    if expected is not None and sign != expected:
        return False
    return all((v - baseline_mean) * sign > 0 for v in values)


def phase_test(
    baseline_values: Sequence[float],
    injection_values: Sequence[float],
    alpha: float = 0.05,
    expected: int | None = None,
    equal_var: bool = False,
    metric: str = "",
) -> MetricDetection:
    if len(injection_values) < 2:
        raise InsufficientDataError("phase comparison needs at least 2 injection turns")
    tt = welch_t_test(baseline_values, injection_values, equal_var=equal_var)
    try:
        d = cohens_d(baseline_values, injection_values).cohens_d
    except UndefinedStatisticError:
        d = math.nan
    consistent = directional_consistency(tt.mean_a, injection_values, expected)
    return MetricDetection(metric, tt, d, consistent, tt.p_two_sided < alpha and consistent)


@dataclass(frozen=True)
class TrendResult:
    metric: str
    correlation: CorrelationResult | None
    flagged: bool
    window: tuple


def trend_test(
    values: Sequence[float],
    turns: Sequence[float],
    alpha: float = 0.05,
    direction: int | None = -1,
    min_window: int = 50,
    metric: str = "P",
) -> TrendResult:
    """Correlate ``values`` with ``turns``; flag a significant trend in ``direction``.

    A constant series has no defined correlation and is reported as no trend.
    """
    if len(values) < min_window:
        raise InsufficientDataError(f"trend window has {len(values)} turns, need {min_window}")
    window = (turns[0], turns[-1]) if len(turns) else (0, 0)
    try:
        corr = pearson(list(turns), list(values))
    except UndefinedStatisticError:
        return TrendResult(metric, None, False, window)
    sign_ok = direction is None or (corr.r > 0) - (corr.r < 0) == direction
    return TrendResult(metric, corr, corr.p_two_sided < alpha and sign_ok, window)


@dataclass(frozen=True)
class TurnUpdate:
    metrics: TurnMetrics
    new_flags: tuple


class ConversationState:
    """Monitoring state for a single conversation.

    Not safe for concurrent turn submission on its own; :class:`Monitor`
    serializes access through :attr:`lock`.
    """

    def __init__(
        self,
        conversation_id: str,
        initial_prompt_tokens: Iterable[int] = (),
        config: IDTConfig | None = None,
        tokenizer: TokenizerSpec | None = None,
    ):
        self.conversation_id = str(conversation_id)
        self.config = config or IDTConfig()
        self.tokenizer = tokenizer or TokenizerSpec()
        self.vocab: dict[str, int] = {}
        self.s_accumulator = EntropyAccumulator(initial_prompt_tokens)
        self.initial_prompt_length = self.s_accumulator.n
        self.turn_count = 0
        self.history: list[TurnMetrics] = []
        self.baseline: BaselineModel | None = None
        self.flags: list[DeviationFlag] = []
        self.external_scores: dict[int, dict[str, float]] = {}
        self.lock = threading.RLock()

    def encode(self, text: str) -> list[int]:
        """Tokenize ``text`` with this conversation's tokenizer and intern table."""
        return tokenize(text, self.tokenizer, self.vocab)

    # -- turn processing ---------------------------------------------------

    def advance(
        self,
        response_tokens: Sequence[int],
        next_prompt_tokens: Sequence[int],
        turn_index: int | None = None,
        external_scores: Mapping[str, float] | None = None,
    ) -> TurnUpdate:
        with self.lock:
            expected = self.turn_count + 1
            if turn_index is not None and turn_index != expected:
                raise TurnOrderError(
                    f"conversation {self.conversation_id!r}: expected turn {expected}, got {turn_index}"
                )
            a = TokenBag.from_tokens(response_tokens)
            sp = TokenBag.from_tokens(next_prompt_tokens)
            # metrics use S before this turn's response and next prompt join it
            metrics = compute_turn_metrics(self.s_accumulator, a, sp, expected)
            self.s_accumulator.add_bag(a).add_bag(sp)
            self.history.append(metrics)
            self.turn_count = expected
            if external_scores:
                self.external_scores[expected] = {k: float(v) for k, v in external_scores.items()}

            new_flags: tuple = ()
            if self.baseline is None and expected == self.config.baseline_window[1]:
                self.baseline = fit_baseline(self.history, self.config.baseline_window, self.config.band_k)
            elif self.baseline is not None and self.config.streaming:
                self._update_recovery(metrics)
                new_flags = tuple(self._deviations(metrics))
                self.flags.extend(new_flags)
            # copies: the stored flags keep changing as recovery is tracked
            return TurnUpdate(metrics, tuple(replace(f) for f in new_flags))

    def process_turn(self, response_tokens, next_prompt_tokens, turn_index=None, external_scores=None) -> TurnMetrics:
        return self.advance(response_tokens, next_prompt_tokens, turn_index, external_scores).metrics

    def _deviations(self, metrics: TurnMetrics) -> Iterable[DeviationFlag]:
        for metric in self.config.monitored_metrics:
            z = self.baseline.z(metric, metrics.get(metric))
            if abs(z) >= self.config.z_threshold:
                yield DeviationFlag(metrics.turn_index, metric, z, 1 if z > 0 else -1)

    def _update_recovery(self, metrics: TurnMetrics) -> None:
        k_max = self.config.recovery_k_max
        for flag in self.flags:
            if flag.recovered_at is None and 0 < metrics.turn_index - flag.turn_index <= k_max:
                if self.baseline.contains(flag.metric, metrics.get(flag.metric)):
                    flag.recovered_at = metrics.turn_index

    # -- detectors ---------------------------------------------------------

    def learn_baseline(self, window: tuple | None = None) -> BaselineModel:
        """(Re)learn the baseline from ``window`` (default: the configured window)."""
        with self.lock:
            self.baseline = fit_baseline(self.history, window or self.config.baseline_window, self.config.band_k)
            return self.baseline

    def series(self, metric: str, turns: Iterable[int] | None = None) -> list[float]:
        if turns is None:
            return [m.get(metric) for m in self.history]
        out = []
        for t in turns:
            if not 1 <= t <= len(self.history):
                raise InsufficientDataError(f"turn {t} not in history (1-{len(self.history)})")
            out.append(self.history[t - 1].get(metric))
        return out

    def detect_phase(
        self,
        injection_turns: Sequence[int],
        alpha: float | None = None,
        metrics: Iterable[str] | None = None,
    ) -> DetectionReport:
        cfg = self.config
        alpha = cfg.alpha if alpha is None else alpha
        names = [canonical_metric(m) for m in (metrics or DETECTOR_METRICS)]
        injection_turns = tuple(int(t) for t in injection_turns)
        if len(injection_turns) < 2:
            raise InsufficientDataError("phase comparison needs at least 2 injection turns")
        lo, hi = cfg.baseline_window
        with self.lock:
            if len(self.history) < hi:
                raise InsufficientDataError(f"baseline window ends at turn {hi}, history has {len(self.history)}")
            baseline_turns = range(lo, hi + 1)
            results = {}
            for name in names:
                expected = cfg.expected_directions.get(name) if cfg.direction_mode == "expected" else None
                results[name] = phase_test(
                    self.series(name, baseline_turns),
                    self.series(name, injection_turns),
                    alpha=alpha,
                    expected=expected,
                    equal_var=cfg.equal_var,
                    metric=name,
                )
        union = any(r.detected for r in results.values())
        return DetectionReport(results, union, injection_turns, (lo, hi), alpha)

    def detect_trend(self, metric: str = "P", window: tuple | None = None, alpha: float | None = None) -> TrendResult:
        cfg = self.config
        name = canonical_metric(metric)
        with self.lock:
            lo, hi = window or (1, len(self.history))
            turns = list(range(lo, hi + 1))
            if len(turns) < cfg.trend_min_window:
                raise InsufficientDataError(f"trend window has {len(turns)} turns, need {cfg.trend_min_window}")
            values = self.series(name, turns)
        return trend_test(
            values, turns,
            alpha=cfg.alpha if alpha is None else alpha,
            direction=cfg.trend_directions.get(name),
            min_window=cfg.trend_min_window,
            metric=name,
        )

    def track_recovery(self, flag: DeviationFlag, k_max: int | None = None) -> int | None:
        """Turns after ``flag`` until its metric is back inside the baseline band."""
        if self.baseline is None:
            raise ConversationError("no baseline learned yet")
        k_max = self.config.recovery_k_max if k_max is None else k_max
        with self.lock:
            for j in range(1, k_max + 1):
                t = flag.turn_index + j
                if t > len(self.history):
                    break
                if self.baseline.contains(flag.metric, self.history[t - 1].get(flag.metric)):
                    return j
        return None

    # -- snapshots ---------------------------------------------------------

    def summary(self, recent: int = 10) -> dict:
        with self.lock:
            return {
                "conversation_id": self.conversation_id,
                "turn_count": self.turn_count,
                "context_tokens": self.s_accumulator.n,
                "baseline": self.baseline.to_dict() if self.baseline else None,
                "recent_flags": [f.to_dict() for f in self.flags[-recent:]] if recent else [],
                "flag_count": len(self.flags),
            }

    def to_dict(self) -> dict:
        with self.lock:
            acc = self.s_accumulator
            return {
                "conversation_id": self.conversation_id,
                "tokenizer": self.tokenizer.to_dict(),
                "vocab": dict(self.vocab),
                "config": self.config.to_dict(),
                "accumulator": {
                    "counts": [[tid, c] for tid, c in acc.counts.items()],
                    "n": acc.n,
                    "clogc": acc.clogc,
                },
                "initial_prompt_length": self.initial_prompt_length,
                "turn_count": self.turn_count,
                "history": [m.to_dict() for m in self.history],
                "baseline": self.baseline.to_dict() if self.baseline else None,
                "flags": [f.to_dict() for f in self.flags],
                "external_scores": {str(k): v for k, v in self.external_scores.items()},
            }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConversationState":
        state = cls(
            d["conversation_id"],
            config=IDTConfig.from_dict(d["config"]),
            tokenizer=TokenizerSpec(**d["tokenizer"]),
        )
        state.vocab = dict(d["vocab"])
        acc = state.s_accumulator
        acc.counts = {int(tid): int(c) for tid, c in d["accumulator"]["counts"]}
        acc.n = int(d["accumulator"]["n"])
        acc.clogc = float(d["accumulator"]["clogc"])
        state.initial_prompt_length = int(d["initial_prompt_length"])
        state.turn_count = int(d["turn_count"])
        state.history = [TurnMetrics.from_dict(m) for m in d["history"]]
        state.baseline = BaselineModel.from_dict(d["baseline"]) if d["baseline"] else None
        state.flags = [DeviationFlag(**f) for f in d["flags"]]
        state.external_scores = {int(k): dict(v) for k, v in d.get("external_scores", {}).items()}
        if len(state.history) != state.turn_count:
            raise ValueError("snapshot history length does not match turn count")
        return state


class Monitor:
    """Registry of live conversations; one lock per conversation."""

    def __init__(self, config: IDTConfig | None = None, tokenizer: TokenizerSpec | None = None):
        self.config = config or IDTConfig()
        self.tokenizer = tokenizer or TokenizerSpec()
        self._states: dict[str, ConversationState] = {}
        self._lock = threading.Lock()

    def __contains__(self, conversation_id):
        return conversation_id in self._states

    def __len__(self):
        return len(self._states)

    def init_conversation(
        self,
        conversation_id: str,
        initial_prompt_tokens: Iterable[int] = (),
        config: IDTConfig | None = None,
    ) -> ConversationState:
        with self._lock:
            if conversation_id in self._states:
                raise DuplicateConversationError(f"conversation {conversation_id!r} already exists")
            state = ConversationState(conversation_id, initial_prompt_tokens, config or self.config, self.tokenizer)
            self._states[conversation_id] = state
            return state

    def add(self, state: ConversationState) -> None:
        with self._lock:
            if state.conversation_id in self._states:
                raise DuplicateConversationError(f"conversation {state.conversation_id!r} already exists")
            self._states[state.conversation_id] = state

    def get(self, conversation_id: str) -> ConversationState:
        try:
            return self._states[conversation_id]
        except KeyError:
            raise UnknownConversationError(f"unknown conversation {conversation_id!r}") from None

    def process_turn(self, conversation_id, response_tokens, next_prompt_tokens, turn_index=None, external_scores=None):
        return self.get(conversation_id).advance(response_tokens, next_prompt_tokens, turn_index, external_scores)

    def remove(self, conversation_id: str) -> ConversationState:
        with self._lock:
            return self._states.pop(conversation_id)


def init_conversation(conversation_id, initial_prompt_tokens=(), config=None, registry: Monitor | None = None):
    """Create a conversation state, registering it when ``registry`` is given."""
    if registry is not None:
        return registry.init_conversation(conversation_id, initial_prompt_tokens, config)
    return ConversationState(conversation_id, initial_prompt_tokens, config)


def process_turn(state: ConversationState, response_tokens, next_prompt_tokens) -> TurnMetrics:
    return state.process_turn(response_tokens, next_prompt_tokens)


def learn_baseline(state: ConversationState, window: tuple | None = None) -> BaselineModel:
    return state.learn_baseline(window)


def detect_phase(state: ConversationState, injection_turns, alpha=None, metrics=None) -> DetectionReport:
    return state.detect_phase(injection_turns, alpha, metrics)


def detect_trend(state: ConversationState, metric="P", window=None, alpha=None) -> TrendResult:
    return state.detect_trend(metric, window, alpha)


def track_recovery(state: ConversationState, flag: DeviationFlag, k_max=None) -> int | None:
    return state.track_recovery(flag, k_max)
