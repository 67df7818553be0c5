"""conv2bench command line: the pipeline end to end or one stage at a time.

Subcommands: ingest, cluster, synth, judge, score, compare, annotate,
report, run.  Provider credentials are read from environment variables
only; everything else comes from flags or the run config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import judging as judging_mod
from . import stats as stats_mod
from . import topics as topics_mod
from .gateway import Gateway, MockProvider, OpenAICompatProvider, ResponseCache, default_templates, load_templates
from .goldstand import BatchStore, build_annotation_pool, judge_profile, stratified_sample
from .pipeline import ConfigError, PipelineConfig, build_report, format_report, run_pipeline
from .synthesis import Checklist, FeedbackAnnotation, Synthesizer, SynthesizedInstruction

logger = logging.getLogger(__name__)


def _read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _write_jsonl(path: str | Path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _make_gateway(args) -> Gateway:
    if args.provider.startswith("mock:"):
        provider = MockProvider.from_file(args.provider.split(":", 1)[1])
    elif args.provider.startswith("openai:"):
        provider = OpenAICompatProvider(args.provider.split(":", 1)[1])
    else:
        raise SystemExit(f"unknown provider spec: {args.provider!r}")
    templates = load_templates(args.templates) if args.templates else default_templates()
    cache = ResponseCache(args.cache) if args.cache else None
    return Gateway(templates, provider, cache=cache)


def _add_gateway_flags(parser) -> None:
    parser.add_argument("--provider", required=True,
                        help="mock:<script.json> or openai:<base-url>")
    parser.add_argument("--templates", help="template directory (default: packaged)")
    parser.add_argument("--cache", help="response cache directory")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    stats = corpus_mod.CorpusStats()
    stream = corpus_mod.prefilter(
        corpus_mod.ingest(args.infile, args.source, adapter=args.adapter, stats=stats),
        lang=args.lang, allow_toxic=args.allow_toxic, stats=stats,
    )
    n = corpus_mod.write_conversations(stream, args.out)
    print(f"kept {n} of {stats.total} conversations -> {args.out}")
    for reason, count in sorted(stats.dropped_by_reason.items()):
        print(f"  dropped {count} ({reason})")
    return 0


def cmd_cluster(args) -> int:
    convs = corpus_mod.read_conversations(args.infile)
    if args.embed.startswith("precomputed:"):
        provider = topics_mod.PrecomputedEmbeddingProvider(args.embed.split(":", 1)[1])
    else:
        provider = topics_mod.HashEmbeddingProvider(dim=args.dim)
    matrix, failures = topics_mod.embed(convs, provider)
    if failures:
        print(f"warning: {len(failures)} conversations failed to embed", file=sys.stderr)
    texts = {c.conv_id: c.first_user_text for c in convs}
    params = topics_mod.ClusterParams(method=args.method, n_clusters=args.n_clusters)
    assignment = topics_mod.cluster(matrix, texts, params, seed=args.seed)
    lexicon = topics_mod.Lexicon.from_file(args.lexicon)
    selected = topics_mod.screen(assignment, lexicon, min_hits=args.min_hits)
    candidates = topics_mod.sample_candidates(
        convs, assignment, selected, n=args.sample, seed=args.seed
    )
    corpus_mod.write_conversations(candidates, args.out)
    print(
        f"{len(assignment.cluster_ids())} clusters, {len(selected)} selected, "
        f"sampled {len(candidates)} -> {args.out}"
    )
    if args.report:
        report = {
            "labels": assignment.labels,
            "top_terms": {str(k): v for k, v in sorted(assignment.top_terms.items())},
            "selected": sorted(selected),
        }
        Path(args.report).write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return 0


def cmd_synth(args) -> int:
    gateway = _make_gateway(args)
    synth = Synthesizer(gateway, args.model)
    stage = args.stage

    if stage == "domain":
        convs = corpus_mod.read_conversations(args.corpus)
        records = []
        for conv in convs:
            try:
                records.append({"conv_id": conv.conv_id, "in_domain": synth.classify_domain(conv)})
            except Exception as exc:  # noqa: BLE001
                records.append({"conv_id": conv.conv_id, "in_domain": False, "error": str(exc)})
        _write_jsonl(args.out, records)
        print(f"{sum(r['in_domain'] for r in records)} of {len(records)} in-domain -> {args.out}")
        return 0

    if stage == "instruction":
        convs = corpus_mod.read_conversations(args.corpus)
        confirmed = {r["conv_id"] for r in _read_jsonl(args.domain) if r["in_domain"]}
        records = []
        for conv in convs:
            if conv.conv_id not in confirmed:
                continue
            try:
                records.append(synth.synthesize_instruction(conv).to_record())
            except Exception as exc:  # noqa: BLE001
                print(f"dropped {conv.conv_id}: {exc}", file=sys.stderr)
        _write_jsonl(args.out, records)
        print(f"synthesized {len(records)} instructions -> {args.out}")
        return 0

    if stage == "filter":
        records = []
        for rec in _read_jsonl(args.instructions):
            instr = SynthesizedInstruction.from_record(rec)
            if not instr.text:
                records.append(instr.to_record())
                continue
            try:
                records.append(synth.filter_instruction(instr).to_record())
            except Exception as exc:  # noqa: BLE001
                out = instr.to_record()
                out.update(valid=False, error=str(exc))
                records.append(out)
        _write_jsonl(args.out, records)
        n_valid = sum(1 for r in records if r["valid"])
        print(f"{n_valid} of {len(records)} instructions valid -> {args.out}")
        return 0

    if stage == "feedback":
        convs = {c.conv_id: c for c in corpus_mod.read_conversations(args.corpus)}
        valid = [
            SynthesizedInstruction.from_record(r)
            for r in _read_jsonl(args.instructions)
            if r["valid"]
        ]
        records = [
            synth.identify_feedback(convs[i.conv_id]).to_record()
            for i in valid if i.conv_id in convs
        ]
        _write_jsonl(args.out, records)
        print(f"annotated {len(records)} conversations -> {args.out}")
        return 0

    if stage == "checklist":
        convs = {c.conv_id: c for c in corpus_mod.read_conversations(args.corpus)}
        instructions = {
            r["conv_id"]: SynthesizedInstruction.from_record(r)
            for r in _read_jsonl(args.instructions) if r["valid"]
        }
        annotations = {
            r["conv_id"]: FeedbackAnnotation.from_record(r)
            for r in _read_jsonl(args.feedback)
        }
        records = []
        for conv_id, instr in instructions.items():
            if conv_id not in convs:
                continue
            fb = annotations.get(conv_id) or FeedbackAnnotation(conv_id=conv_id)
            try:
                records.append(synth.generate_checklist(convs[conv_id], instr, fb).to_record())
            except Exception as exc:  # noqa: BLE001
                print(f"dropped {conv_id}: {exc}", file=sys.stderr)
        _write_jsonl(args.out, records)
        print(f"generated {len(records)} checklists -> {args.out}")
        return 0

    raise SystemExit(f"unknown stage: {stage}")


def cmd_judge(args) -> int:
    gateway = _make_gateway(args)
    checklists = [Checklist.from_record(r) for r in _read_jsonl(args.set)]
    if args.instructions:
        instructions = {
            r["conv_id"]: SynthesizedInstruction.from_record(r)
            for r in _read_jsonl(args.instructions) if r["valid"]
        }
    else:
        # checklists only exist for valid instructions, whose text they carry
        instructions = {
            c.conv_id: SynthesizedInstruction(c.conv_id, c.instruction_text, valid=True)
            for c in checklists
        }
    eval_set = [
        (instructions[c.conv_id], c) for c in checklists if c.conv_id in instructions
    ]
    variant = args.variant.replace("-", "_")
    responses = None
    if args.responses_in and Path(args.responses_in).exists():
        responses = {
            r["conv_id"]: judging_mod.SubjectResponse.from_record(r)
            for r in _read_jsonl(args.responses_in)
        }
    table, responses = judging_mod.run_benchmark(
        gateway, eval_set, args.subject, args.judge, variant=variant, responses=responses
    )
    table.save(args.out)
    if args.responses_out:
        _write_jsonl(
            args.responses_out,
            (responses[cid].to_record() for cid in sorted(responses)),
        )
    status = "degraded" if table.degraded else "ok"
    print(
        f"{len(table.rows)} rows, {len(table.exclusions)} excluded ({status}) -> {args.out}"
    )
    return 0


def cmd_score(args) -> int:
    table = judging_mod.VerdictTable.load(args.verdicts)
    scores = stats_mod.scores_from_table(table)
    values = [s.score for s in scores]
    if args.subsample_n:
        result = stats_mod.subsample_bootstrap_scores(
            values, n=args.subsample_n, B=args.B, seed=args.seed
        )
    else:
        result = stats_mod.cluster_bootstrap_scores(values, B=args.B, seed=args.seed)
    doc = {
        "subject_model_id": table.subject_model_id,
        "judge_model_id": table.judge_model_id,
        "variant": table.variant,
        **result.to_record(),
        "scores": [
            {"conv_id": s.conv_id, "n_items": s.n_items, "score": s.score} for s in scores
        ],
    }
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(
        f"{table.subject_model_id} [{table.variant}] "
        f"theta={result.theta:.4f} ci=[{result.ci_low:.4f}, {result.ci_high:.4f}] "
        f"(B={result.B}, seed={result.seed})"
    )
    return 0


def cmd_compare(args) -> int:
    summary = json.loads(Path(args.scores).read_text(encoding="utf-8"))
    columns, reference = stats_mod.read_reference_scores(args.reference)
    ours = {
        model: by_variant[args.variant]["theta"]
        for model, by_variant in summary.items()
        if args.variant in by_variant
    }
    for model in sorted(reference):
        if model not in ours:
            print(f"note: reference model {model!r} not in scores; ignored", file=sys.stderr)
    rows = []
    for column in columns:
        paired = [
            (ours[m], reference[m][column])
            for m in sorted(ours)
            if m in reference and column in reference[m]
        ]
        if len(paired) < 3:
            print(f"note: {column}: only {len(paired)} overlapping models; omitted",
                  file=sys.stderr)
            continue
        rc = stats_mod.rank_compare([p[0] for p in paired], [p[1] for p in paired])
        rows.append((column, rc))
        print(
            f"{column:24s} rho={rc.rho:.3f} (p={rc.p_rho:.3f})  "
            f"tau={rc.tau:.3f} (p={rc.p_tau:.3f})  n={rc.n}"
        )
    if args.out:
        doc = {
            column: {"rho": rc.rho, "p_rho": rc.p_rho, "tau": rc.tau,
                     "p_tau": rc.p_tau, "n": rc.n}
            for column, rc in rows
        }
        Path(args.out).write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return 0


def _load_judge_tables(paths) -> dict[str, list[judging_mod.VerdictTable]]:
    tables: dict[str, list[judging_mod.VerdictTable]] = {}
    for p in paths or []:
        table = judging_mod.VerdictTable.load(p)
        tables.setdefault(table.judge_model_id, []).append(table)
    return tables


def cmd_annotate(args) -> int:
    if args.action == "sample":
        tables = [judging_mod.VerdictTable.load(p) for p in args.verdicts]
        checklists = {
            r["conv_id"]: Checklist.from_record(r) for r in _read_jsonl(args.checklists)
        }
        responses: dict[tuple[str, str], str] = {}
        for path in args.responses:
            for r in _read_jsonl(path):
                responses[(r["conv_id"], r["subject_model_id"])] = r["text"]
        pool = build_annotation_pool(tables, checklists, responses)
        batch = stratified_sample(pool, total_n=args.n, seed=args.seed, batch_id=args.batch_id)
        store = BatchStore.create(args.out_dir, batch)
        store.close()
        counts = batch.per_model_counts()
        print(f"sampled {len(batch.items)} items into {args.out_dir}")
        for model, count in sorted(counts.items()):
            print(f"  {model}: {count}")
        return 0

    if args.action == "serve":
        from .service import serve

        store = BatchStore.open(args.batch_dir)
        serve(
            store,
            judge_tables=_load_judge_tables(args.judge_verdicts),
            ui_dir=args.ui_dir,
            host=args.host,
            port=args.port,
        )
        return 0

    if args.action == "profile":
        store = BatchStore.open(args.batch_dir)
        tables = _load_judge_tables(args.judge_verdicts)
        if not tables:
            raise SystemExit("profile needs at least one --judge-verdicts file")
        for judge_id, table in sorted(tables.items()):
            report = judge_profile(store, table)
            print(json.dumps(report.to_record(), sort_keys=True, indent=2))
        store.close()
        return 0

    raise SystemExit(f"unknown annotate action: {args.action}")


def cmd_report(args) -> int:
    report = build_report(args.run_dir, reference_path=args.reference)
    text = format_report(report)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_run(args) -> int:
    try:
        config = PipelineConfig.load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    manifest = run_pipeline(config, fresh=args.fresh)
    run_dir = config.resolve(config.out_root) / config.config_hash()[:12]
    print(f"run dir: {run_dir}")
    for stage in manifest.stages:
        counts = " ".join(f"{k}={v}" for k, v in stage["counts"].items())
        print(f"  {stage['name']:12s} {stage['status']:8s} {counts}")
    return 0 if all(s["status"] != "failed" for s in manifest.stages) else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conv2bench",
        description="Build checklist benchmarks from chat logs and calibrate them.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize a raw log file into canonical records")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--adapter", default="canonical", choices=sorted(corpus_mod.ADAPTERS))
    p.add_argument("--lang", default="en")
    p.add_argument("--allow-toxic", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cluster", help="embed, cluster, screen, and sample candidates")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--min-hits", type=int, default=1)
    p.add_argument("--sample", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed", default="hash", help="hash or precomputed:<file>")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--method", default="auto", choices=["auto", "density", "kmeans"])
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("synth", help="run one LLM synthesis stage")
    p.add_argument("--stage", required=True,
                   choices=["domain", "instruction", "filter", "feedback", "checklist"])
    p.add_argument("--corpus")
    p.add_argument("--domain")
    p.add_argument("--instructions")
    p.add_argument("--feedback")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_gateway_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("judge", help="judge one subject model against checklists")
    p.add_argument("--set", required=True, help="checklists JSONL")
    p.add_argument("--instructions",
                   help="filtered instructions JSONL (default: derived from the checklists)")
    p.add_argument("--subject", required=True)
    p.add_argument("--judge", required=True)
    p.add_argument("--variant", default="full", choices=["full", "instructions-only", "instructions_only"])
    p.add_argument("--out", required=True)
    p.add_argument("--responses-in")
    p.add_argument("--responses-out")
    _add_gateway_flags(p)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("score", help="theta with bootstrap CI from a verdict table")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsample-n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="rank correlations against reference scores")
    p.add_argument("--scores", required=True, help="scores summary.json from a run")
    p.add_argument("--variant", default="full")
    p.add_argument("--reference", required=True, help="CSV: model, <column>...")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("annotate", help="gold-standard sampling, service, profiling")
    p.add_argument("action", choices=["sample", "serve", "profile"])
    p.add_argument("--verdicts", nargs="+", default=[])
    p.add_argument("--checklists")
    p.add_argument("--responses", nargs="+", default=[])
    p.add_argument("--n", type=int, default=488)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-id", default="batch-0")
    p.add_argument("--out-dir")
    p.add_argument("--batch-dir")
    p.add_argument("--judge-verdicts", nargs="+", default=[])
    p.add_argument("--ui-dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("report", help="human-readable + structured run report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--reference")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="execute the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--fresh", action="store_true",
                   help="discard run-dir checkpoints (the response cache persists)")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
