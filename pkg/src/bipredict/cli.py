"""Command line entry point: ``bipredict <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_settings
from .exceptions import BipredictError
from .idt import IDTConfig, Monitor
from .infometrics import DETECTOR_METRICS, canonical_metric
from .token_stats import MODES, TokenizerSpec
from .transport import records, svg

log = logging.getLogger("bipredict")


def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("-", 1)
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a turn range like 1-30, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _metric_list(text: str) -> list[str]:
    try:
        return [canonical_metric(v.strip()) for v in text.split(",") if v.strip()]
    except KeyError as exc:
        raise argparse.ArgumentTypeError(exc.args[0]) from None


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON config file (tokenizer/detector/generator sections)")
    g.add_argument("--tokenizer", choices=MODES, help="tokenizer mode for transcript text fields")
    g.add_argument("--lowercase", action="store_true", default=None, help="lowercase text in whitespace mode")
    g.add_argument("--baseline-window", type=_window, help="baseline turn range, e.g. 1-30")
    g.add_argument("--alpha", type=float, help="significance level for detection")
    g.add_argument("--z-threshold", type=float, help="streaming deviation threshold in baseline SDs")
    g.add_argument("--direction-mode", choices=("uniform", "expected"), help="directional consistency rule")
    g.add_argument("--seed", type=int, help="generator seed")


def _settings(args):
    s = load_settings(getattr(args, "config", None))
    if getattr(args, "tokenizer", None) or getattr(args, "lowercase", None) is not None:
        s.tokenizer = TokenizerSpec(
            mode=args.tokenizer or s.tokenizer.mode,
            lowercase=bool(args.lowercase) if args.lowercase is not None else s.tokenizer.lowercase,
        )
    overrides = {}
    for arg, key in (("baseline_window", "baseline_window"), ("alpha", "alpha"),
                     ("z_threshold", "z_threshold"), ("direction_mode", "direction_mode")):
        value = getattr(args, arg, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        s.detector = IDTConfig.from_dict({**s.detector.to_dict(), **overrides})
    if getattr(args, "seed", None) is not None:
        s.generator = harness.GeneratorConfig.from_dict({**s.generator.to_dict(), "seed": args.seed})
    return s


def _replay(args, settings):
    recs = records.read_transcript(args.transcript, settings.tokenizer)
    monitor = Monitor(settings.detector, settings.tokenizer)
    updates = records.replay_records(recs, monitor)
    if not updates:
        raise BipredictError("transcript contains no conversations")
    cid = args.conversation
    if cid is None:
        if len(updates) > 1:
            raise BipredictError(f"transcript holds {len(updates)} conversations; choose one with --conversation")
        cid = next(iter(updates))
    if cid not in updates:
        raise BipredictError(f"conversation {cid!r} not in transcript")
    return monitor.get(cid), updates[cid]


def _write(text: str, path) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_analyze(args) -> int:
    settings = _settings(args)
    _, updates = _replay(args, settings)
    _write(records.metrics_csv(updates), args.output)
    return 0


def _detection_text(report, cid) -> str:
    lines = [f"conversation {cid}: baseline turns {report.baseline_window[0]}-{report.baseline_window[1]} "
             f"vs injection turns {','.join(map(str, report.injection_turns))} (alpha={report.alpha:g})"]
    rows = []
    for r in report.rows():
        rows.append({
            "metric": r["metric"], "t": f"{r['t']:.4f}", "df": f"{r['df']:.2f}", "p": f"{r['p']:.4g}",
            "d": f"{r['cohens_d']:.3f}", "direction": {1: "+", -1: "-", 0: "0"}[r["direction"]],
            "consistent": "yes" if r["consistent"] else "no", "detected": "YES" if r["detected"] else "no",
        })
    lines.append(harness.format_table(rows))
    lines.append(f"union: {'DETECTED' if report.union_detected else 'not detected'}")
    return "\n".join(lines) + "\n"


def _detection_csv(report) -> str:
    buf = io.StringIO()
    rows = report.rows()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: records.fmt(v) if isinstance(v, float) else v for k, v in r.items()})
    writer.writerow({"metric": "union", "detected": report.union_detected})
    return buf.getvalue()


def cmd_detect(args) -> int:
    settings = _settings(args)
    state, _ = _replay(args, settings)
    report = state.detect_phase(args.injections, metrics=args.metrics)
    sys.stdout.write(_detection_text(report, state.conversation_id))
    if args.csv:
        _write(_detection_csv(report), args.csv)
    return 0


def cmd_trend(args) -> int:
    settings = _settings(args)
    state, _ = _replay(args, settings)
    res = state.detect_trend(args.metric, args.window)
    if res.correlation is None:
        print(f"{res.metric}: no trend (constant series)")
    else:
        c = res.correlation
        print(f"{res.metric}: r={c.r:.4f} p={c.p_two_sided:.4g} n={c.n} "
              f"turns {res.window[0]}-{res.window[1]} -> {'FLAGGED' if res.flagged else 'not flagged'}")
    return 0


def cmd_simulate(args) -> int:
    settings = _settings(args)
    plan = None
    if args.kind != "none":
        plan = harness.PerturbationPlan(args.kind, tuple(args.injections), args.injection_length)
    conv = harness.generate_conversation(settings.generator, args.turns, plan)
    buf = io.StringIO()
    records.write_transcript(conv.records(), buf)
    _write(buf.getvalue(), args.output)
    return 0


def cmd_report(args) -> int:
    settings = _settings(args)
    with open(args.metrics_csv, encoding="utf-8", newline="") as fh:
        rows = records.read_metrics_csv(fh)
    if not rows:
        raise BipredictError("metrics CSV has no data rows")
    metric = args.metric
    if metric not in rows[0]:
        try:
            metric = canonical_metric(metric)
        except KeyError:
            pass
    if metric not in rows[0] or metric in ("turn_index", "flags"):
        raise BipredictError(f"metrics CSV has no {metric!r} column")
    text = svg.trajectory_svg(
        [r["turn_index"] for r in rows],
        [r[metric] for r in rows],
        baseline_window=settings.detector.baseline_window,
        injections=args.injections,
        band_k=settings.detector.band_k,
        metric=metric,
    )
    _write(text, args.output)
    return 0


def cmd_experiment(args) -> int:
    settings = _settings(args)
    summaries = []
    for kind in args.kinds:
        plan = harness.PerturbationPlan(kind, tuple(args.injections), args.injection_length)
        summaries.append(harness.run_experiment(settings.generator, plan, args.seeds, args.turns,
                                                settings.detector, n_jobs=args.jobs))
    if args.control_seeds:
        summaries.append(harness.run_experiment(settings.generator, None, args.control_seeds, args.turns,
                                                settings.detector, n_jobs=args.jobs))
    print(harness.format_summary(summaries))
    if args.csv_dir:
        args.csv_dir.mkdir(parents=True, exist_ok=True)
        for name, text in harness.tables_to_csv(harness.summarize_table(summaries)).items():
            (args.csv_dir / f"{name}.csv").write_text(text, encoding="utf-8")
    return 0


def cmd_serve(args) -> int:
    from .transport.service import serve

    settings = _settings(args)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    serve(args.host, args.port, settings.detector, settings.tokenizer)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bipredict", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    default_inj = ",".join(map(str, harness.DEFAULT_INJECTION_TURNS))

    p = sub.add_parser("analyze", help="per-turn metrics CSV for a transcript")
    p.add_argument("transcript", type=Path)
    p.add_argument("-o", "--output", help="output CSV (default stdout)")
    p.add_argument("--conversation", help="conversation id when the transcript holds several")
    _common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("detect", help="phase-comparison detection at given injection turns")
    p.add_argument("transcript", type=Path)
    p.add_argument("--injections", type=_int_list, default=list(harness.DEFAULT_INJECTION_TURNS),
                   help=f"comma-separated injection turns (default {default_inj})")
    p.add_argument("--metrics", type=_metric_list, default=list(DETECTOR_METRICS))
    p.add_argument("--csv", help="also write the machine-readable report here")
    p.add_argument("--conversation")
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("trend", help="correlation of a metric with turn index")
    p.add_argument("transcript", type=Path)
    p.add_argument("--metric", default="P")
    p.add_argument("--window", type=_window, help="turn range (default: whole conversation)")
    p.add_argument("--conversation")
    _common(p)
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("simulate", help="write a synthetic pre-tokenized transcript")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--kind", choices=(*harness.KINDS, "none"), default="none")
    p.add_argument("--turns", type=int, default=100)
    p.add_argument("--injections", type=_int_list, default=list(harness.DEFAULT_INJECTION_TURNS))
    p.add_argument("--injection-length", type=int, default=40)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="SVG trajectory chart from a metrics CSV")
    p.add_argument("metrics_csv", type=Path)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--injections", type=_int_list, default=[])
    p.add_argument("--metric", default="P")
    _common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="batch synthetic detection experiment and summary tables")
    p.add_argument("--kinds", type=lambda s: s.split(","), default=list(harness.KINDS))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--control-seeds", type=int, default=0, help="unperturbed runs for false-detection rate")
    p.add_argument("--turns", type=int, default=100)
    p.add_argument("--injections", type=_int_list, default=list(harness.DEFAULT_INJECTION_TURNS))
    p.add_argument("--injection-length", type=int, default=40)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--csv-dir", type=Path)
    _common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("serve", help="run the HTTP monitoring sidecar")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8077)
    _common(p)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BipredictError, ValueError, OSError) as exc:
        print(f"bipredict {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
