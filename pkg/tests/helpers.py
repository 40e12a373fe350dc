from bipredict.idt import ConversationState, IDTConfig
from bipredict.infometrics import TurnMetrics


def state_from_series(series, config=None):
    """ConversationState whose history carries the given metric series.

    ``series`` maps short metric names (P, Hf, Hb, dH) to equal-length lists;
    unspecified metrics are zero.
    """
    n = len(next(iter(series.values())))
    state = ConversationState("synthetic", (), config or IDTConfig(streaming=False))
    for i in range(n):
        state.history.append(TurnMetrics(
            h_s=0.0, h_a=0.0, h_sp=0.0, h_sa=0.0, h_sasp=0.0, mi=0.0,
            p=series.get("P", [0.0] * n)[i],
            hf=series.get("Hf", [0.0] * n)[i],
            hb=series.get("Hb", [0.0] * n)[i],
            delta_h=series.get("dH", [0.0] * n)[i],
            turn_index=i + 1,
        ))
    state.turn_count = n
    return state
