import math
import random
import threading

import numpy as np
import pytest

from bipredict import harness
from bipredict.exceptions import (
    DuplicateConversationError,
    InsufficientDataError,
    TurnOrderError,
    UnknownConversationError,
)
from bipredict.idt import (
    ConversationState,
    DeviationFlag,
    IDTConfig,
    Monitor,
    detect_phase,
    detect_trend,
    directional_consistency,
    init_conversation,
    learn_baseline,
    process_turn,
    track_recovery,
)
from bipredict.stats_kernel import welch_t_test
from oracles import naive_entropy

A, B, C = 0, 1, 2
INJ = (31, 46, 61, 76, 91)


def with_injections(base, inj_values, n=100):
    """Series of length ``n``: ``base`` values everywhere, ``inj_values`` at INJ."""
    out = list(base[:n])
    for t, v in zip(INJ, inj_values):
        out[t - 1] = v
    return out


class TestInit:
    def test_two_token_prompt(self):
        st = init_conversation("c1", [A, B])
        assert st.s_accumulator.entropy() == 1.0
        assert st.turn_count == 0

    def test_empty_prompt(self):
        st = init_conversation("c2", [])
        assert st.s_accumulator.entropy() == 0.0 and st.turn_count == 0

    def test_duplicate(self):
        mon = Monitor()
        init_conversation("c1", [A, B], registry=mon)
        with pytest.raises(DuplicateConversationError):
            init_conversation("c1", [A], registry=mon)

    def test_unknown(self):
        with pytest.raises(UnknownConversationError):
            Monitor().get("nope")


class TestProcessTurn:
    def test_empty_context_example(self):
        st = init_conversation("c2", [])
        m = process_turn(st, [A, B], [A, C])
        assert (m.h_s, m.h_a, m.h_sp, m.h_sa) == (0.0, 1.0, 1.0, 1.0)
        assert m.h_sasp == pytest.approx(1.5, abs=1e-12)
        assert m.mi == pytest.approx(0.5, abs=1e-12)
        assert m.p == pytest.approx(0.25, abs=1e-12)
        assert m.turn_index == 1

    def test_repeated_single_token(self):
        st = init_conversation("d", [A])
        for _ in range(3):
            m = process_turn(st, [A], [A])
            assert m.p == 0.0 and m.mi == 0.0 and m.hf == 0.0 and m.hb == 0.0

    def test_context_grows_after_metrics(self):
        st = init_conversation("g", [A, B])
        process_turn(st, [C, C], [A])
        m = process_turn(st, [B], [C])
        assert m.h_s == pytest.approx(naive_entropy([A, B, C, C, A]), abs=1e-12)

    def test_out_of_order(self):
        st = init_conversation("o", [A])
        st.advance([A], [B], turn_index=1)
        with pytest.raises(TurnOrderError):
            st.advance([A], [B], turn_index=3)
        assert st.turn_count == 1

    def test_context_monotonic_and_update_counter(self):
        rng = random.Random(2)
        prompt = [rng.randrange(50) for _ in range(37)]
        st = init_conversation("m", prompt)
        total = len(prompt)
        for _ in range(40):
            a = [rng.randrange(80) for _ in range(rng.randrange(0, 60))]
            sp = [rng.randrange(80) for _ in range(rng.randrange(0, 60))]
            before_n, before_updates = st.s_accumulator.n, st.s_accumulator.updates
            process_turn(st, a, sp)
            total += len(a) + len(sp)
            assert st.s_accumulator.n >= before_n
            assert st.s_accumulator.n == total
            assert st.s_accumulator.updates - before_updates == len(a) + len(sp)


class TestBaseline:
    def test_constant(self, series_state):
        st = series_state({"P": [0.3] * 30})
        b = learn_baseline(st, (1, 30))
        assert b.mean["P"] == 0.3 and b.std["P"] == 0.0
        assert b.band("P") == (0.3, 0.3)

    def test_window_beyond_history(self, series_state):
        st = series_state({"P": [0.3] * 20})
        with pytest.raises(InsufficientDataError):
            learn_baseline(st, (1, 30))

    def test_sample_std(self, series_state):
        vals = [0.29, 0.31] * 15
        b = learn_baseline(series_state({"P": vals}), (1, 30))
        assert b.std["P"] == pytest.approx(float(np.std(vals, ddof=1)), abs=1e-15)

    def test_auto_learned_at_window_end(self):
        conv = harness.generate_conversation(harness.GeneratorConfig(seed=4), 31)
        st = ConversationState("auto", conv.prompt)
        for i, (a, sp) in enumerate(conv.turns, start=1):
            st.process_turn(a, sp)
            assert (st.baseline is None) == (i < 30)

    def test_synthetic_mean_near_generator_expectation(self):
        # expectation: average baseline P over independent seeds
        means = []
        for seed in range(1, 21):
            st = harness.replay(harness.generate_conversation(harness.GeneratorConfig(seed=seed), 30))
            means.append(st.baseline.mean["P"])
        expected = float(np.mean(means))
        st = harness.replay(harness.generate_conversation(harness.GeneratorConfig(seed=0), 30))
        b = st.baseline
        assert abs(b.mean["P"] - expected) <= 3 * b.std["P"] / math.sqrt(30)


class TestDetectPhase:
    def test_p_drop_detected(self, series_state):
        rng = np.random.default_rng(0)
        base = (0.30 + 0.01 * rng.standard_normal(100)).tolist()
        inj = [0.05, 0.07, 0.10, 0.06, 0.08]
        st = series_state({"P": with_injections(base, inj)})
        report = detect_phase(st, INJ, metrics=["P"])
        det = report.metrics["P"]
        assert det.detected and report.union_detected
        assert det.ttest.direction == -1
        ref = welch_t_test(base[:30], inj)
        assert det.ttest.p_two_sided == pytest.approx(ref.p_two_sided, rel=1e-12)
        assert det.ttest.p_two_sided < 1e-3

    @pytest.mark.parametrize("mode", ["uniform", "expected"])
    def test_null_rate(self, series_state, mode):
        rng = np.random.default_rng(1)
        trials = 2000
        hits = {m: 0 for m in ("P", "Hf", "Hb", "dH")}
        cfg = IDTConfig(streaming=False, direction_mode=mode)
        for _ in range(trials):
            series = {m: rng.normal(size=100).tolist() for m in hits}
            report = detect_phase(series_state(series, cfg), INJ)
            for m in hits:
                hits[m] += report.detected(m)
        slack = 3 * math.sqrt(0.05 * 0.95 / trials)
        for m, h in hits.items():
            assert h / trials <= 0.05 + slack, (m, h)

    def test_union_fires_on_hb_alone(self, series_state):
        rng = np.random.default_rng(2)
        hf = (1.0 + 0.05 * rng.standard_normal(100)).tolist()
        hb = with_injections((2.0 + 0.05 * rng.standard_normal(100)).tolist(), [2.6, 2.7, 2.65, 2.8, 2.75])
        st = series_state({"Hf": hf, "Hb": hb})
        report = detect_phase(st, INJ, metrics=["Hf", "Hb"])
        assert not report.detected("Hf")
        assert report.detected("Hb")
        assert report.union_detected

    def test_union_is_or_of_components(self, series_state):
        rng = np.random.default_rng(3)
        cfg = IDTConfig(streaming=False, direction_mode="uniform")
        seen = set()
        for _ in range(200):
            series = {}
            for m in ("P", "Hf", "Hb", "dH"):
                base = rng.normal(size=100)
                base[np.array(INJ) - 1] += rng.choice([0.0, 1.5, -3.0])
                series[m] = base.tolist()
            report = detect_phase(series_state(series, cfg), INJ)
            components = []
            for m, vals in series.items():
                b, inj = vals[:30], [vals[t - 1] for t in INJ]
                tt = welch_t_test(b, inj)
                mean_b = sum(b) / 30
                shift = sum(inj) / 5 - mean_b
                consistent = shift != 0 and all((v - mean_b) * shift > 0 for v in inj)
                components.append(tt.p_two_sided < 0.05 and consistent)
                assert report.detected(m) == components[-1]
            assert report.union_detected == any(components)
            seen.add(report.union_detected)
        assert seen == {True, False}

    def test_needs_two_injections(self, series_state):
        st = series_state({"P": [0.3] * 100})
        with pytest.raises(InsufficientDataError):
            detect_phase(st, [31])

    def test_injection_beyond_history(self, series_state):
        st = series_state({"P": [0.3 + 0.001 * i for i in range(90)]})
        with pytest.raises(InsufficientDataError):
            detect_phase(st, INJ)

    def test_directional_consistency(self):
        assert directional_consistency(0.3, [0.1, 0.2])
        assert not directional_consistency(0.3, [0.1, 0.4])
        assert not directional_consistency(0.3, [0.1, 0.2], expected=1)
        assert not directional_consistency(0.3, [0.3, 0.3])

    def test_report_rows(self, series_state):
        st = series_state({"P": with_injections([0.3 + 0.01 * (i % 3) for i in range(100)], [0.1] * 5)})
        rows = detect_phase(st, INJ, metrics=["P"]).rows()
        assert rows[0]["metric"] == "P" and rows[0]["detected"] is True


def test_streaming_and_phase_agree_on_large_deviations():
    cfg = IDTConfig(direction_mode="uniform")
    checked = 0
    for kind in harness.KINDS:
        for seed in (1, 2):
            conv = harness.generate_conversation(
                harness.GeneratorConfig(seed=seed), 100, harness.PerturbationPlan(kind))
            st = harness.replay(conv, cfg)
            report = st.detect_phase(INJ)
            flagged = {(f.turn_index, f.metric) for f in st.flags}
            for m in ("P", "Hf", "Hb", "dH"):
                z = [st.baseline.z(m, st.history[t - 1].get(m)) for t in INJ]
                if all(abs(v) > 10 for v in z) and len({v > 0 for v in z}) == 1:
                    checked += 1
                    assert report.detected(m)
                    assert all((t, m) in flagged for t in INJ)
    assert checked >= 3


class TestTrend:
    def test_exact_linear(self, series_state):
        st = series_state({"P": [0.3 - 0.001 * t for t in range(1, 201)]})
        res = detect_trend(st, "P")
        assert res.correlation.r == pytest.approx(-1.0, abs=1e-12)
        assert res.flagged

    def test_constant(self, series_state):
        res = detect_trend(series_state({"P": [0.3] * 200}), "P")
        assert res.correlation is None and not res.flagged

    def test_rising_not_flagged_for_p(self, series_state):
        res = detect_trend(series_state({"P": [0.1 + 0.001 * t for t in range(200)]}), "P")
        assert res.correlation.r > 0.99 and not res.flagged

    def test_window_too_short(self, series_state):
        with pytest.raises(InsufficientDataError):
            detect_trend(series_state({"P": [0.3 + 0.01 * (t % 2) for t in range(200)]}), "P", window=(1, 20))

    def test_power(self, series_state):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            t = np.arange(1, 201)
            p = 0.3 - 0.0005 * t + rng.normal(0, 0.01, 200)
            hits += detect_trend(series_state({"P": p.tolist()}), "P").flagged
        assert hits >= 9


class TestRecovery:
    def _state(self, series_state, tail):
        base = [0.29, 0.31] * 15
        st = series_state({"P": base + tail})
        st.learn_baseline((1, 30))
        lo, hi = st.baseline.band("P")
        assert 0.279 < lo < 0.281 and 0.319 < hi < 0.321
        return st

    def test_next_turn_inside(self, series_state):
        st = self._state(series_state, [0.08, 0.29, 0.3, 0.3])
        flag = DeviationFlag(31, "P", st.baseline.z("P", 0.08), -1)
        assert track_recovery(st, flag, 5) == 1

    def test_later_turn(self, series_state):
        st = self._state(series_state, [0.08, 0.1, 0.2, 0.3])
        assert track_recovery(st, DeviationFlag(31, "P", -20.0, -1), 5) == 3

    def test_absent(self, series_state):
        st = self._state(series_state, [0.08] * 8)
        assert track_recovery(st, DeviationFlag(31, "P", -20.0, -1), 5) is None

    def test_streaming_recovery_matches_scan(self):
        conv = harness.generate_conversation(harness.GeneratorConfig(seed=3), 100, harness.PerturbationPlan("topic_shift"))
        st = harness.replay(conv)
        assert st.flags
        for flag in st.flags:
            scanned = st.track_recovery(flag)
            assert flag.recovered_at == (None if scanned is None else flag.turn_index + scanned)


def test_replay_deterministic():
    conv = harness.generate_conversation(harness.GeneratorConfig(seed=5), 100, harness.PerturbationPlan("contradiction"))
    s1, s2 = harness.replay(conv), harness.replay(conv)
    assert s1.history == s2.history
    assert s1.detect_phase(INJ) == s2.detect_phase(INJ)
    assert [f.to_dict() for f in s1.flags] == [f.to_dict() for f in s2.flags]


def test_state_dict_round_trip_continuation():
    conv = harness.generate_conversation(harness.GeneratorConfig(seed=6), 60)
    full = harness.replay(conv)
    part = ConversationState(conv.conversation_id, conv.prompt)
    for a, sp in conv.turns[:35]:
        part.process_turn(a, sp)
    restored = ConversationState.from_dict(part.to_dict())
    for a, sp in conv.turns[35:]:
        restored.process_turn(a, sp)
    assert restored.history == full.history


def test_monitor_threads_isolated():
    convs = [harness.generate_conversation(harness.GeneratorConfig(seed=s), 40) for s in range(4)]
    serial = {c.conversation_id: harness.replay(c).history for c in convs}
    mon = Monitor()
    for c in convs:
        mon.init_conversation(c.conversation_id, c.prompt)

    def run(c):
        for i, (a, sp) in enumerate(c.turns, start=1):
            mon.process_turn(c.conversation_id, a, sp, turn_index=i)

    threads = [threading.Thread(target=run, args=(c,)) for c in convs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for c in convs:
        assert mon.get(c.conversation_id).history == serial[c.conversation_id]


def test_config_round_trip_and_validation():
    cfg = IDTConfig(baseline_window=(1, 20), direction_mode="uniform")
    assert IDTConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        IDTConfig.from_dict({"nonsense": 1})
    with pytest.raises(ValueError):
        IDTConfig(direction_mode="sideways")


def test_turn_update_flags_are_point_in_time():
    conv = harness.generate_conversation(harness.GeneratorConfig(seed=3), 100, harness.PerturbationPlan("topic_shift"))
    st = ConversationState(conv.conversation_id, conv.prompt)
    emitted = []
    for a, sp in conv.turns:
        emitted.extend(st.advance(a, sp).new_flags)
    assert emitted and all(f.recovered_at is None for f in emitted)
    assert any(f.recovered_at is not None for f in st.flags)
