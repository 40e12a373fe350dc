"""Per-turn information metrics over (context, response, next prompt) bags.

Joint terms are pooled-bag entropies: the bags are merged by adding
counts and the entropy of the merged distribution stands in for the
joint entropy. With S the accumulated context, A the response and S' the
next prompt::

    MI = H(S,A) + H(S') - H(S,A,S')
    P  = MI / (H(S) + H(A) + H(S'))
    Hf = H(S,A,S') - H(S,A)
    Hb = H(S,A,S') - H(S')
    dH = Hf - Hb

Under pooling MI can be negative and P is not bounded by 0.5; values are
reported unclamped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .token_stats import EntropyAccumulator, TokenBag, entropy

EPS = 1e-12

# short metric name -> TurnMetrics attribute
METRIC_FIELDS = {"P": "p", "Hf": "hf", "Hb": "hb", "dH": "delta_h"}
DETECTOR_METRICS = tuple(METRIC_FIELDS)

CSV_COLUMNS = (
    ("H_S", "h_s"),
    ("H_A", "h_a"),
    ("H_Sp", "h_sp"),
    ("H_SA", "h_sa"),
    ("H_SASp", "h_sasp"),
    ("MI", "mi"),
    ("P", "p"),
    ("Hf", "hf"),
    ("Hb", "hb"),
    ("dH", "delta_h"),
)


def canonical_metric(name: str) -> str:
    """Normalise user-facing metric names (``"delta_h"``, ``"ΔH"``...) to the short form."""
    aliases = {"p": "P", "hf": "Hf", "hb": "Hb", "dh": "dH", "delta_h": "dH", "δh": "dH"}
    if name in METRIC_FIELDS:
        return name
    key = name.lower()
    if key in aliases:
        return aliases[key]
    raise KeyError(f"unknown metric {name!r}; expected one of {DETECTOR_METRICS}")


@dataclass(frozen=True)
class TurnMetrics:
    h_s: float
    h_a: float
    h_sp: float
    h_sa: float
    h_sasp: float
    mi: float
    p: float
    hf: float
    hb: float
    delta_h: float
    turn_index: int = 0
    token_counts: tuple = field(default=(0, 0, 0))

    def get(self, metric: str) -> float:
        return getattr(self, METRIC_FIELDS[canonical_metric(metric)])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_counts"] = list(self.token_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TurnMetrics":
        d = dict(d)
        d["token_counts"] = tuple(d.get("token_counts", (0, 0, 0)))
        return cls(**d)


def compute_turn_metrics(
    s: TokenBag | EntropyAccumulator,
    a: TokenBag,
    sp: TokenBag,
    turn_index: int = 0,
) -> TurnMetrics:
    """Full metric vector for one turn.

    ``s`` may be a plain bag or the conversation's running accumulator;
    with an accumulator the cost depends only on the sizes of ``a`` and
    ``sp``.
    """
    acc = s if isinstance(s, EntropyAccumulator) else EntropyAccumulator().add_bag(s)
    h_s = acc.entropy()
    h_a = entropy(a)
    h_sp = entropy(sp)
    h_sa = acc.entropy_with(a)
    h_sasp = acc.entropy_with(a, sp)

    mi = h_sa + h_sp - h_sasp
    denom = h_s + h_a + h_sp
    p = mi / denom if denom > EPS else 0.0
    hf = h_sasp - h_sa
    hb = h_sasp - h_sp
    return TurnMetrics(
        h_s=h_s,
        h_a=h_a,
        h_sp=h_sp,
        h_sa=h_sa,
        h_sasp=h_sasp,
        mi=mi,
        p=p,
        hf=hf,
        hb=hb,
        delta_h=hf - hb,
        turn_index=turn_index,
        token_counts=(acc.n, a.total, sp.total),
    )


def p_of(metrics: TurnMetrics) -> float:
    return metrics.p


def delta_h_of(metrics: TurnMetrics) -> float:
    return metrics.delta_h
