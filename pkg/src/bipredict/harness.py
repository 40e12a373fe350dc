"""Synthetic conversations, perturbation schedules and batch experiments.

The generator stands in for live model traffic. Each message draws tokens
from a mixture of the recent context (probability ``coupling``) and a
uniform topic vocabulary, so ``coupling`` controls how much each turn
reuses what came before. Perturbations replace the next prompt at the
scheduled turns with a fixed-length message whose vocabulary breaks that
reuse:

* ``topic_shift``: uniform over a disjoint topic vocabulary;
* ``non_sequitur``: uniform over the whole vocabulary;
* ``contradiction``: half marker tokens, half current-topic tokens drawn
  with coupling dropped to ``contradiction_coupling``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import InsufficientDataError
from .idt import ConversationState, DeviationFlag, DetectionReport, IDTConfig
from .infometrics import TurnMetrics
from .stats_kernel import CorrelationResult, pearson

KINDS = ("contradiction", "topic_shift", "non_sequitur")
DEFAULT_INJECTION_TURNS = (31, 46, 61, 76, 91)
REPORT_METRICS = ("P", "Hb", "dH", "Hf")

# Values measured on live model conversations; synthetic runs are not
# expected to reproduce them.
REFERENCE_NOTE = (
    "Reference values from live model traffic (not reproducible with synthetic data): "
    "baseline P 0.275 +/- 0.029, baseline dH -3.10 +/- 0.81; "
    "P correlates significantly with embedding similarity in 85% of conditions "
    "and with judge scores in 44%."
)


@dataclass
class GeneratorConfig:
    vocab_size: int = 2000
    topic_size: int = 300
    coupling: float = 0.7
    turn_length: tuple = (80, 150)
    context_window: int = 500
    marker_count: int = 20
    contradiction_coupling: float = 0.1
    contradiction_marker_fraction: float = 0.5
    # context generated by the same process before turn 1; keeps the
    # baseline window free of the small-context transient
    warmup_tokens: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.warmup_tokens < 0:
            raise ValueError("warmup_tokens must be non-negative")
        self.turn_length = (int(self.turn_length[0]), int(self.turn_length[1]))
        if not 0 < self.topic_size <= self.vocab_size:
            raise ValueError("topic_size must be in (0, vocab_size]")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if not 0 < self.turn_length[0] <= self.turn_length[1]:
            raise ValueError(f"invalid turn_length {self.turn_length}")
        if self.context_window < 1:
            raise ValueError("context_window must be positive")
        if not 0.0 <= self.contradiction_marker_fraction <= 1.0:
            raise ValueError("contradiction_marker_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["turn_length"] = list(self.turn_length)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PerturbationPlan:
    kind: str
    injection_turns: tuple = DEFAULT_INJECTION_TURNS
    injection_length: int = 40

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "injection_turns", tuple(sorted(int(t) for t in self.injection_turns)))
        if self.injection_length < 1:
            raise ValueError("injection_length must be positive")


@dataclass
class SyntheticConversation:
    conversation_id: str
    prompt: list
    turns: list  # (response, next_prompt) token lists
    kind: str | None = None
    injection_turns: tuple = ()
    seed: int = 0

    def records(self) -> list[dict]:
        """Transcript records (pre-tokenized) for this conversation."""
        out = [{"type": "init", "conversation_id": self.conversation_id, "prompt_tokens": list(self.prompt)}]
        for i, (a, sp) in enumerate(self.turns, start=1):
            out.append({
                "type": "turn",
                "conversation_id": self.conversation_id,
                "turn_index": i,
                "response_tokens": list(a),
                "next_prompt_tokens": list(sp),
            })
        return out


class _Sampler:
    def __init__(self, config: GeneratorConfig, rng: np.random.Generator):
        self.cfg = config
        self.rng = rng
        self.topic = np.arange(config.topic_size)
        self.window: deque = deque(maxlen=config.context_window)

    def length(self) -> int:
        lo, hi = self.cfg.turn_length
        return int(self.rng.integers(lo, hi + 1))

    def uniform(self, vocab: np.ndarray, n: int) -> np.ndarray:
        return vocab[self.rng.integers(0, len(vocab), size=n)]

    def mixture(self, n: int, coupling: float) -> np.ndarray:
        out = self.uniform(self.topic, n)
        if self.window and coupling > 0:
            ctx = np.fromiter(self.window, dtype=np.int64, count=len(self.window))
            mask = self.rng.random(n) < coupling
            k = int(mask.sum())
            out[mask] = ctx[self.rng.integers(0, len(ctx), size=k)]
        return out

    def observe(self, tokens: Iterable[int]) -> None:
        self.window.extend(int(t) for t in tokens)


def _injection(sampler: _Sampler, plan: PerturbationPlan) -> np.ndarray:
    cfg = sampler.cfg
    n = plan.injection_length
    if plan.kind == "topic_shift":
        shifted = np.arange(cfg.topic_size, 2 * cfg.topic_size)
        return sampler.uniform(shifted, n)
    if plan.kind == "non_sequitur":
        return sampler.uniform(np.arange(cfg.vocab_size), n)
    markers = np.arange(cfg.vocab_size - cfg.marker_count, cfg.vocab_size)
    out = sampler.mixture(n, cfg.contradiction_coupling)
    mask = sampler.rng.random(n) < cfg.contradiction_marker_fraction
    out[mask] = sampler.uniform(markers, int(mask.sum()))
    return out


def generate_conversation(
    config: GeneratorConfig | None = None,
    n_turns: int = 100,
    plan: PerturbationPlan | None = None,
    conversation_id: str | None = None,
) -> SyntheticConversation:
    cfg = config or GeneratorConfig()
    if plan is not None:
        if plan.injection_turns and (plan.injection_turns[0] < 1 or plan.injection_turns[-1] > n_turns):
            raise ValueError(f"injection turns {plan.injection_turns} outside 1-{n_turns}")
        if plan.kind == "topic_shift" and 2 * cfg.topic_size > cfg.vocab_size - cfg.marker_count:
            raise ValueError("vocab_size too small for a disjoint shifted topic")
        if plan.kind == "contradiction" and cfg.topic_size > cfg.vocab_size - cfg.marker_count:
            raise ValueError("marker tokens overlap the topic vocabulary")
    rng = np.random.default_rng(cfg.seed)
    sampler = _Sampler(cfg, rng)
    injections = set(plan.injection_turns) if plan else set()

    prompt = sampler.uniform(sampler.topic, sampler.length())
    sampler.observe(prompt)
    parts = [prompt]
    remaining = cfg.warmup_tokens
    while remaining > 0:
        chunk = sampler.mixture(min(sampler.length(), remaining), cfg.coupling)
        sampler.observe(chunk)
        parts.append(chunk)
        remaining -= len(chunk)
    prompt = np.concatenate(parts)
    turns = []
    for t in range(1, n_turns + 1):
        a = sampler.mixture(sampler.length(), cfg.coupling)
        sampler.observe(a)
        if t in injections:
            sp = _injection(sampler, plan)
        else:
            sp = sampler.mixture(sampler.length(), cfg.coupling)
        sampler.observe(sp)
        turns.append((a.tolist(), sp.tolist()))
    cid = conversation_id or f"{plan.kind if plan else 'control'}-seed{cfg.seed}"
    return SyntheticConversation(
        cid, prompt.tolist(), turns,
        kind=plan.kind if plan else None,
        injection_turns=plan.injection_turns if plan else (),
        seed=cfg.seed,
    )


def replay(conversation: SyntheticConversation, config: IDTConfig | None = None) -> ConversationState:
    state = ConversationState(conversation.conversation_id, conversation.prompt, config)
    for a, sp in conversation.turns:
        state.process_turn(a, sp)
    return state


@dataclass(frozen=True)
class RunResult:
    kind: str | None
    seed: int
    report: DetectionReport
    recovery: tuple  # per injection turn: turns until P re-enters the band, or None
    baseline_p: tuple  # (mean, std)
    baseline_dh: tuple


@dataclass
class ExperimentSummary:
    runs: list = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    def detection_rate(self, metric: str = "union", kind: str | None = "any") -> float:
        runs = self.runs if kind == "any" else [r for r in self.runs if r.kind == kind]
        if not runs:
            return math.nan
        if metric == "union":
            hits = sum(r.report.union_detected for r in runs)
        else:
            hits = sum(r.report.detected(metric) for r in runs)
        return hits / len(runs)

    def detection_rates(self) -> dict:
        return {m: self.detection_rate(m) for m in (*REPORT_METRICS, "union")}

    def false_positive_rate(self, metric: str = "union") -> float:
        return self.detection_rate(metric, kind=None)

    def recovery_fractions(self, within: int) -> float:
        values = [j for r in self.runs for j in r.recovery]
        if not values:
            return math.nan
        return sum(j is not None and j <= within for j in values) / len(values)

    def kinds(self) -> list:
        seen = []
        for r in self.runs:
            if r.kind not in seen:
                seen.append(r.kind)
        return seen


def _recovery(state: ConversationState, turns: Sequence[int], k_max: int) -> tuple:
    out = []
    for t in turns:
        z = state.baseline.z("P", state.history[t - 1].p)
        flag = DeviationFlag(t, "P", z, 1 if z > 0 else -1)
        out.append(state.track_recovery(flag, k_max))
    return tuple(out)


def run_single(
    config: GeneratorConfig,
    plan: PerturbationPlan | None,
    seed: int,
    n_turns: int = 100,
    idt_config: IDTConfig | None = None,
    pseudo_injection_turns: Sequence[int] = DEFAULT_INJECTION_TURNS,
) -> RunResult:
    cfg = GeneratorConfig.from_dict({**config.to_dict(), "seed": seed})
    conv = generate_conversation(cfg, n_turns, plan)
    state = replay(conv, idt_config)
    turns = plan.injection_turns if plan else tuple(pseudo_injection_turns)
    report = state.detect_phase(turns)
    b = state.baseline
    return RunResult(
        plan.kind if plan else None,
        seed,
        report,
        _recovery(state, turns, state.config.recovery_k_max),
        (b.mean["P"], b.std["P"]),
        (b.mean["dH"], b.std["dH"]),
    )


def run_experiment(
    config: GeneratorConfig | None = None,
    plan: PerturbationPlan | None = None,
    n_seeds: int = 3,
    n_turns: int = 100,
    idt_config: IDTConfig | None = None,
    seeds: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> ExperimentSummary:
    """Generate, replay and phase-test one run per seed.

    Without a plan the runs are unperturbed controls tested at the default
    injection turns, which measures the false-detection rate.
    """
    config = config or GeneratorConfig()
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(n_seeds)]
    args = [(config, plan, s, n_turns, idt_config) for s in seeds]
    if n_jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(_run_args, args))
    else:
        runs = [run_single(*a) for a in args]
    return ExperimentSummary(runs)


def _run_args(args):
    return run_single(*args)


def correlate_external(
    history: Sequence[TurnMetrics],
    scores: Mapping[int, Mapping[str, float]],
    metric: str,
    score_name: str,
) -> CorrelationResult:
    """Pearson correlation between a metric and an external per-turn score.

    ``scores`` maps turn index to named scores; turns missing either value
    are skipped.
    """
    by_turn = {m.turn_index: m for m in history}
    unknown = [t for t in scores if t not in by_turn]
    if unknown:
        raise ValueError(f"scores reference turns not in history: {sorted(unknown)[:5]}")
    xs, ys = [], []
    for t in sorted(by_turn):
        value = scores.get(t, {}).get(score_name)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        xs.append(by_turn[t].get(metric))
        ys.append(float(value))
    if len(xs) < 3:
        raise InsufficientDataError(f"only {len(xs)} turns carry both {metric} and {score_name!r}")
    return pearson(xs, ys)


def _kind_label(kind):
    return kind if kind is not None else "control"


def summarize_table(summaries: Iterable[ExperimentSummary]) -> dict:
    """Detection-rate and baseline-statistics tables.

    Returns ``{"detection": rows, "baseline": rows}`` where each row is a
    dict; detection rows have one column per perturbation kind plus an
    overall column, formatted as percentages.
    """
    runs = [r for s in summaries for r in s.runs]
    if not runs:
        return {"detection": [], "baseline": []}
    merged = ExperimentSummary(runs)
    kinds = merged.kinds()
    columns = [(f"{_kind_label(k)} (n={sum(r.kind == k for r in runs)})", k) for k in kinds]
    columns.append((f"Overall (n={len(runs)})", "any"))

    detection = []
    for metric in (*REPORT_METRICS, "union"):
        row = {"metric": metric}
        for label, k in columns:
            row[label] = f"{100 * merged.detection_rate(metric, k):.0f}%"
        detection.append(row)

    baseline = []
    for r in runs:
        baseline.append({
            "run": f"{_kind_label(r.kind)}-seed{r.seed}",
            "P": f"{r.baseline_p[0]:.3f} ± {r.baseline_p[1]:.3f}",
            "dH": f"{r.baseline_dh[0]:.3f} ± {r.baseline_dh[1]:.3f}",
        })
    return {"detection": detection, "baseline": baseline}


def tables_to_csv(tables: dict) -> dict:
    out = {}
    for name, rows in tables.items():
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        out[name] = buf.getvalue()
    return out


def format_table(rows: Sequence[Mapping]) -> str:
    """Aligned plain-text rendering of a list of row dicts."""
    if not rows:
        return ""
    headers = list(rows[0])
    cells = [[str(r[h]) for h in headers] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def format_summary(summaries: Iterable[ExperimentSummary]) -> str:
    summaries = list(summaries)
    tables = summarize_table(summaries)
    parts = ["Detection rates", format_table(tables["detection"]), "",
             "Baseline statistics (turns in baseline window)", format_table(tables["baseline"])]
    runs = [r for s in summaries for r in s.runs if r.kind is not None]
    if runs:
        merged = ExperimentSummary(runs)
        parts += ["", f"P recovery within 1 turn: {merged.recovery_fractions(1):.0%}, "
                      f"within 2 turns: {merged.recovery_fractions(2):.0%}"]
    parts += ["", REFERENCE_NOTE]
    return "\n".join(parts)
