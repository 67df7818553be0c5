"""End-to-end pipeline orchestration.

A run is driven by one declarative JSON config.  Every run writes into an
immutable directory named by the config hash; each stage checkpoints its
output there (synthesis stages per conversation), so interrupted or repeated
runs resume instead of repeating provider work.  Manifests contain only
deterministic facts (counts, statuses); token usage and provider call counts
go to a separate usage.json, so two runs with the same config, cache, and
seeds produce byte-identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import corpus as corpus_mod
from . import judging as judging_mod
from . import stats as stats_mod
from . import topics as topics_mod
from .corpus import Conversation, CorpusStats
from .gateway import Gateway, MockProvider, OpenAICompatProvider, ResponseCache, default_templates, load_templates
from .synthesis import (
    Checklist,
    FeedbackAnnotation,
    SynthesisError,
    Synthesizer,
    SynthesizedInstruction,
)

logger = logging.getLogger(__name__)

SYNTH_STAGES = ("domain", "instruction", "filter", "feedback", "checklist")


class ConfigError(Exception):
    pass


class StageFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    corpus_path: str
    source_name: str
    lexicon_path: str
    subject_models: list[str]
    judge_model: str
    pipeline_model: str
    provider: str  # "mock:<script path>" | "openai:<base url>"
    adapter: str = "canonical"
    lang: str = "en"
    allow_toxic: bool = False
    min_hits: int = 1
    sample_n: int = 1000
    embed: str = "hash"  # "hash" | "precomputed:<path>"
    embed_dim: int = 32
    cluster_method: str = "auto"
    n_clusters: int | None = None
    variants: list[str] = field(default_factory=lambda: ["full", "instructions_only"])
    templates_dir: str | None = None
    stage_models: dict[str, str] = field(default_factory=dict)
    bootstrap_B: int = 1000
    seed: int = 0
    max_attempts: int = 3
    out_root: str = "runs"
    cache_dir: str | None = None  # default: <out_root>/cache, shared across runs

    raw: dict[str, Any] = field(default_factory=dict, repr=False)
    base_dir: Path = field(default_factory=Path, repr=False)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__ if f not in ("raw", "base_dir")}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        missing = [
            f for f in ("corpus_path", "source_name", "lexicon_path",
                        "subject_models", "judge_model", "pipeline_model", "provider")
            if f not in raw
        ]
        if missing:
            raise ConfigError(f"config missing required fields: {missing}")
        cfg = cls(**raw)
        cfg.raw = raw
        cfg.base_dir = path.parent.resolve()
        cfg.validate()
        return cfg

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        """Fail before any work if referenced inputs cannot resolve."""
        for label, rel in (("corpus", self.corpus_path), ("lexicon", self.lexicon_path)):
            if not self.resolve(rel).exists():
                raise ConfigError(f"{label} path does not exist: {self.resolve(rel)}")
        if self.provider.startswith("mock:"):
            script = self.resolve(self.provider.split(":", 1)[1])
            if not script.exists():
                raise ConfigError(f"mock script does not exist: {script}")
        elif not self.provider.startswith("openai:"):
            raise ConfigError(f"unknown provider spec: {self.provider!r}")
        if self.embed.startswith("precomputed:"):
            vecs = self.resolve(self.embed.split(":", 1)[1])
            if not vecs.exists():
                raise ConfigError(f"embedding file does not exist: {vecs}")
        elif self.embed != "hash":
            raise ConfigError(f"unknown embed spec: {self.embed!r}")
        if self.templates_dir is not None and not self.resolve(self.templates_dir).is_dir():
            raise ConfigError(f"templates dir does not exist: {self.templates_dir}")
        bad = [v for v in self.variants if v not in judging_mod.VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants: {bad}")
        if not self.subject_models:
            raise ConfigError("subject_models must be non-empty")

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def stage_model(self, stage: str) -> str:
        return self.stage_models.get(stage, self.pipeline_model)

    def build_gateway(self) -> Gateway:
        if self.provider.startswith("mock:"):
            provider = MockProvider.from_file(self.resolve(self.provider.split(":", 1)[1]))
        else:
            provider = OpenAICompatProvider(self.provider.split(":", 1)[1])
        templates = (
            load_templates(self.resolve(self.templates_dir))
            if self.templates_dir
            else default_templates()
        )
        cache_root = (
            self.resolve(self.cache_dir)
            if self.cache_dir
            else self.resolve(self.out_root) / "cache"
        )
        return Gateway(templates, provider, cache=ResponseCache(cache_root))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    stages: list[dict[str, Any]] = field(default_factory=list)
    funnel: dict[str, int] = field(default_factory=dict)

    def record(self, name: str, status: str, **counts: Any) -> None:
        self.stages.append({"name": name, "status": status, "counts": counts})

    def to_json(self) -> str:
        doc = {"config_hash": self.config_hash, "stages": self.stages, "funnel": self.funnel}
        return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        manifest = cls(config_hash=doc["config_hash"])
        manifest.stages = doc["stages"]
        manifest.funnel = doc["funnel"]
        return manifest


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _append_jsonl(fh, rec: dict[str, Any]) -> None:
    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    fh.flush()


def _run_per_conversation(
    path: Path,
    inputs: list[Conversation],
    work: Callable[[Conversation], dict[str, Any] | None],
) -> list[dict[str, Any]]:
    """Per-conversation checkpointing: already-processed ids are skipped,
    new results are appended as they complete."""
    done = {rec["conv_id"]: rec for rec in _read_jsonl(path)}
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for conv in inputs:
            if conv.conv_id in done:
                continue
            rec = work(conv)
            if rec is not None:
                _append_jsonl(fh, rec)
                done[conv.conv_id] = rec
    order = {c.conv_id: i for i, c in enumerate(inputs)}
    return sorted(
        (r for r in done.values() if r["conv_id"] in order),
        key=lambda r: order[r["conv_id"]],
    )


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def run_pipeline(config: PipelineConfig, fresh: bool = False) -> RunManifest:
    """Execute ingest through scoring, checkpointing every stage.

    A stage failure is recorded in the manifest and later stages are
    skipped; the manifest is always written.
    """
    run_dir = config.resolve(config.out_root) / config.config_hash()[:12]
    if fresh and run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    gateway = config.build_gateway()
    manifest = RunManifest(config_hash=config.config_hash())
    failed = False

    state: dict[str, Any] = {}
    stages: list[tuple[str, Callable[[], None]]] = [
        ("ingest", lambda: _stage_ingest(config, run_dir, manifest, state)),
        ("cluster", lambda: _stage_cluster(config, run_dir, manifest, state)),
        ("domain", lambda: _stage_domain(config, gateway, run_dir, manifest, state)),
        ("instruction", lambda: _stage_instruction(config, gateway, run_dir, manifest, state)),
        ("filter", lambda: _stage_filter(config, gateway, run_dir, manifest, state)),
        ("feedback", lambda: _stage_feedback(config, gateway, run_dir, manifest, state)),
        ("checklist", lambda: _stage_checklist(config, gateway, run_dir, manifest, state)),
        ("judge", lambda: _stage_judge(config, gateway, run_dir, manifest, state)),
        ("score", lambda: _stage_score(config, run_dir, manifest, state)),
    ]
    for name, stage in stages:
        if failed:
            manifest.record(name, "skipped")
            continue
        try:
            stage()
        except Exception as exc:  # noqa: BLE001 - every failure must land in the manifest
            logger.exception("stage %s failed", name)
            manifest.record(name, "failed", error=str(exc))
            failed = True

    (run_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    (run_dir / "usage.json").write_text(
        json.dumps(gateway.counters_snapshot(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest


def _stage_ingest(config, run_dir, manifest, state) -> None:
    path = run_dir / "corpus.jsonl"
    stats_path = run_dir / "corpus_stats.json"
    if path.exists() and stats_path.exists():
        convs = corpus_mod.read_conversations(path)
        stats_rec = json.loads(stats_path.read_text(encoding="utf-8"))
    else:
        stats = CorpusStats()
        stream = corpus_mod.prefilter(
            corpus_mod.ingest(
                config.resolve(config.corpus_path), config.source_name,
                adapter=config.adapter, stats=stats,
            ),
            lang=config.lang, allow_toxic=config.allow_toxic, stats=stats,
        )
        convs = list(stream)
        corpus_mod.write_conversations(convs, path)
        stats_rec = stats.to_record()
        stats_path.write_text(
            json.dumps(stats_rec, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    state["corpus"] = convs
    manifest.funnel["ingested_total"] = stats_rec["total"]
    manifest.funnel["ingested_kept"] = stats_rec["kept"]
    manifest.record("ingest", "ok", **stats_rec)


def _stage_cluster(config, run_dir, manifest, state) -> None:
    path = run_dir / "candidates.jsonl"
    report_path = run_dir / "clusters.json"
    convs = state["corpus"]
    if path.exists() and report_path.exists():
        candidates = corpus_mod.read_conversations(path)
        report = json.loads(report_path.read_text(encoding="utf-8"))
    else:
        if config.embed.startswith("precomputed:"):
            provider = topics_mod.PrecomputedEmbeddingProvider(
                config.resolve(config.embed.split(":", 1)[1])
            )
        else:
            provider = topics_mod.HashEmbeddingProvider(dim=config.embed_dim)
        matrix, failures = topics_mod.embed(convs, provider)
        texts = {c.conv_id: c.first_user_text for c in convs}
        params = topics_mod.ClusterParams(
            method=config.cluster_method, n_clusters=config.n_clusters
        )
        assignment = topics_mod.cluster(matrix, texts, params, seed=config.seed)
        lexicon = topics_mod.Lexicon.from_file(config.resolve(config.lexicon_path))
        selected = topics_mod.screen(assignment, lexicon, min_hits=config.min_hits)
        candidates = topics_mod.sample_candidates(
            convs, assignment, selected, n=config.sample_n, seed=config.seed
        )
        corpus_mod.write_conversations(candidates, path)
        report = {
            "n_clusters": len(assignment.cluster_ids()),
            "selected_clusters": sorted(selected),
            "candidate_pool": sum(
                1 for c in convs if assignment.labels.get(c.conv_id) in selected
            ),
            "embed_failures": [f.conv_id for f in failures],
            "top_terms": {str(k): v for k, v in sorted(assignment.top_terms.items())},
        }
        report_path.write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    state["candidates"] = candidates
    manifest.funnel["sampled"] = len(candidates)
    manifest.record(
        "cluster", "ok",
        n_clusters=report["n_clusters"],
        selected_clusters=len(report["selected_clusters"]),
        candidate_pool=report["candidate_pool"],
        sampled=len(candidates),
    )


def _stage_domain(config, gateway, run_dir, manifest, state) -> None:
    synth = Synthesizer(gateway, config.stage_model("domain"), config.max_attempts)

    def work(conv: Conversation) -> dict[str, Any]:
        try:
            return {"conv_id": conv.conv_id, "in_domain": synth.classify_domain(conv)}
        except Exception as exc:  # noqa: BLE001
            logger.warning("domain stage: %s excluded (%s)", conv.conv_id, exc)
            return {"conv_id": conv.conv_id, "in_domain": False, "error": str(exc)}

    records = _run_per_conversation(run_dir / "domain.jsonl", state["candidates"], work)
    confirmed_ids = {r["conv_id"] for r in records if r["in_domain"]}
    state["domain_confirmed"] = [
        c for c in state["candidates"] if c.conv_id in confirmed_ids
    ]
    manifest.funnel["domain_confirmed"] = len(confirmed_ids)
    manifest.record(
        "domain", "ok", classified=len(records), confirmed=len(confirmed_ids)
    )


def _stage_instruction(config, gateway, run_dir, manifest, state) -> None:
    synth = Synthesizer(gateway, config.stage_model("instruction"), config.max_attempts)

    def work(conv: Conversation) -> dict[str, Any] | None:
        try:
            return synth.synthesize_instruction(conv).to_record()
        except Exception as exc:  # noqa: BLE001
            logger.warning("instruction stage: %s dropped (%s)", conv.conv_id, exc)
            return None

    records = _run_per_conversation(
        run_dir / "instructions.jsonl", state["domain_confirmed"], work
    )
    instructions = [SynthesizedInstruction.from_record(r) for r in records]
    state["instructions"] = instructions
    nonempty = sum(1 for i in instructions if i.text)
    manifest.funnel["instructions_nonempty"] = nonempty
    manifest.record("instruction", "ok", synthesized=len(instructions), nonempty=nonempty)


def _stage_filter(config, gateway, run_dir, manifest, state) -> None:
    synth = Synthesizer(gateway, config.stage_model("filter"), config.max_attempts)
    by_id = {i.conv_id: i for i in state["instructions"]}
    convs = [c for c in state["domain_confirmed"] if by_id.get(c.conv_id)]

    def work(conv: Conversation) -> dict[str, Any]:
        instr = by_id[conv.conv_id]
        if not instr.text:
            return instr.to_record()  # already invalid by construction
        try:
            return synth.filter_instruction(instr).to_record()
        except Exception as exc:  # noqa: BLE001
            logger.warning("filter stage: %s marked invalid (%s)", conv.conv_id, exc)
            rec = instr.to_record()
            rec.update(valid=False, rejection_reason=None, error=str(exc))
            return rec

    records = _run_per_conversation(run_dir / "filtered.jsonl", convs, work)
    filtered = [
        SynthesizedInstruction.from_record(
            {k: r[k] for k in ("conv_id", "text", "valid", "rejection_reason")}
        )
        for r in records
    ]
    state["filtered"] = filtered
    valid = [i for i in filtered if i.valid]
    state["valid_instructions"] = valid
    manifest.funnel["instructions_valid"] = len(valid)
    manifest.record("filter", "ok", filtered=len(filtered), valid=len(valid))


def _stage_feedback(config, gateway, run_dir, manifest, state) -> None:
    synth = Synthesizer(gateway, config.stage_model("feedback"), config.max_attempts)
    valid_ids = {i.conv_id for i in state["valid_instructions"]}
    convs = [c for c in state["domain_confirmed"] if c.conv_id in valid_ids]

    def work(conv: Conversation) -> dict[str, Any]:
        return synth.identify_feedback(conv).to_record()

    records = _run_per_conversation(run_dir / "feedback.jsonl", convs, work)
    annotations = {r["conv_id"]: FeedbackAnnotation.from_record(r) for r in records}
    state["feedback"] = annotations
    with_feedback = sum(1 for a in annotations.values() if not a.empty)
    manifest.record("feedback", "ok", annotated=len(annotations), with_feedback=with_feedback)


def _stage_checklist(config, gateway, run_dir, manifest, state) -> None:
    synth = Synthesizer(gateway, config.stage_model("checklist"), config.max_attempts)
    instructions = {i.conv_id: i for i in state["valid_instructions"]}
    annotations = state["feedback"]
    convs = [c for c in state["domain_confirmed"] if c.conv_id in instructions]

    def work(conv: Conversation) -> dict[str, Any] | None:
        fb = annotations.get(conv.conv_id) or FeedbackAnnotation(conv_id=conv.conv_id)
        try:
            return synth.generate_checklist(conv, instructions[conv.conv_id], fb).to_record()
        except SynthesisError as exc:
            logger.warning("checklist stage: %s dropped (%s)", conv.conv_id, exc)
            return None

    records = _run_per_conversation(run_dir / "checklists.jsonl", convs, work)
    checklists = [Checklist.from_record(r) for r in records]
    state["checklists"] = checklists
    n_items = sum(len(c.items) for c in checklists)
    n_feedback = sum(len(c.feedback_items()) for c in checklists)
    manifest.funnel["checklists"] = len(checklists)
    manifest.funnel["checklist_items"] = n_items
    manifest.funnel["feedback_items"] = n_feedback
    manifest.record(
        "checklist", "ok",
        checklists=len(checklists),
        items=n_items,
        instruction_items=n_items - n_feedback,
        feedback_items=n_feedback,
    )


def _stage_judge(config, gateway, run_dir, manifest, state) -> None:
    instructions = {i.conv_id: i for i in state["valid_instructions"]}
    eval_set = [
        (instructions[c.conv_id], c) for c in state["checklists"]
        if c.conv_id in instructions
    ]
    verdict_dir = run_dir / "verdicts"
    response_dir = run_dir / "responses"
    verdict_dir.mkdir(exist_ok=True)
    response_dir.mkdir(exist_ok=True)

    counts: dict[str, Any] = {}
    for subject in config.subject_models:
        responses: dict[str, judging_mod.SubjectResponse] = {}
        resp_path = response_dir / f"{subject}.jsonl"
        if resp_path.exists():
            responses = {
                r["conv_id"]: judging_mod.SubjectResponse.from_record(r)
                for r in _read_jsonl(resp_path)
            }
        for variant in config.variants:
            table_path = verdict_dir / f"{subject}__{variant}.jsonl"
            if table_path.exists():
                table = judging_mod.VerdictTable.load(table_path)
            else:
                table, responses = judging_mod.run_benchmark(
                    gateway, eval_set, subject, config.judge_model,
                    variant=variant, responses=responses,
                    max_attempts=config.max_attempts,
                )
                table.save(table_path)
            counts[f"{subject}__{variant}_rows"] = len(table.rows)
            counts[f"{subject}__{variant}_excluded"] = len(table.exclusions)
        if not resp_path.exists():
            with resp_path.open("w", encoding="utf-8") as fh:
                for conv_id in sorted(responses):
                    _append_jsonl(fh, responses[conv_id].to_record())
    state["verdict_dir"] = verdict_dir
    manifest.record("judge", "ok", **counts)


def _stage_score(config, run_dir, manifest, state) -> None:
    verdict_dir = state["verdict_dir"]
    score_dir = run_dir / "scores"
    score_dir.mkdir(exist_ok=True)
    summary: dict[str, dict[str, Any]] = {}
    for subject in config.subject_models:
        for variant in config.variants:
            table = judging_mod.VerdictTable.load(verdict_dir / f"{subject}__{variant}.jsonl")
            scores = stats_mod.scores_from_table(table)
            result = stats_mod.cluster_bootstrap_scores(
                [s.score for s in scores], B=config.bootstrap_B, seed=config.seed
            )
            doc = {
                "subject_model_id": subject,
                "judge_model_id": config.judge_model,
                "variant": variant,
                **result.to_record(),
                "scores": [
                    {"conv_id": s.conv_id, "n_items": s.n_items, "score": s.score}
                    for s in scores
                ],
            }
            (score_dir / f"{subject}__{variant}.json").write_text(
                json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
            summary.setdefault(subject, {})[variant] = {
                "theta": result.theta,
                "ci_low": result.ci_low,
                "ci_high": result.ci_high,
            }
    (score_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    manifest.record("score", "ok", subjects=len(config.subject_models))


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

MIN_OVERLAP_FOR_CORRELATION = 3


def build_report(
    run_dir: str | Path,
    reference_path: str | Path | None = None,
    variants: list[str] | None = None,
) -> dict[str, Any]:
    """Assemble the run report: theta with CI per subject, rank correlations
    against each reference column, and the verbosity check.

    Reference rows naming unknown models are ignored with a warning; the
    correlation section is omitted entirely below 3 overlapping models.
    """
    run_dir = Path(run_dir)
    score_dir = run_dir / "scores"
    score_files = sorted(score_dir.glob("*__*.json"))
    if not score_files:
        raise StageFailure(f"no score files under {score_dir}")

    scores: dict[str, dict[str, Any]] = {}
    for path in score_files:
        doc = json.loads(path.read_text(encoding="utf-8"))
        scores.setdefault(doc["variant"], {})[doc["subject_model_id"]] = doc
    if variants:
        scores = {v: t for v, t in scores.items() if v in variants}

    report: dict[str, Any] = {"subjects": {}, "correlations": {}, "notices": []}
    for variant, by_subject in sorted(scores.items()):
        for subject, doc in sorted(by_subject.items()):
            report["subjects"].setdefault(subject, {})[variant] = {
                "theta": doc["theta"],
                "ci_low": doc["ci_low"],
                "ci_high": doc["ci_high"],
                "B": doc["B"],
            }

    if reference_path is not None:
        columns, reference = stats_mod.read_reference_scores(reference_path)
        for variant, by_subject in sorted(scores.items()):
            known = sorted(by_subject)
            for model in sorted(reference):
                if model not in by_subject:
                    report["notices"].append(
                        f"reference model {model!r} not evaluated under {variant}; ignored"
                    )
            for column in columns:
                paired = [
                    (by_subject[m]["theta"], reference[m][column])
                    for m in known
                    if m in reference and column in reference[m]
                ]
                if len(paired) < MIN_OVERLAP_FOR_CORRELATION:
                    report["notices"].append(
                        f"correlation omitted for {variant}/{column}: "
                        f"only {len(paired)} overlapping models"
                    )
                    continue
                ours = [p[0] for p in paired]
                theirs = [p[1] for p in paired]
                rc = stats_mod.rank_compare(ours, theirs)
                report["correlations"][f"{variant}/{column}"] = {
                    "rho": rc.rho, "p_rho": rc.p_rho,
                    "tau": rc.tau, "p_tau": rc.p_tau,
                    "n": rc.n,
                }

    verbosity = _verbosity_from_run(run_dir, scores)
    if verbosity:
        report["verbosity"] = verbosity
    return report


def _verbosity_from_run(run_dir: Path, scores) -> dict[str, Any]:
    response_dir = run_dir / "responses"
    out: dict[str, Any] = {}
    for variant, by_subject in sorted(scores.items()):
        lengths: list[int] = []
        values: list[float] = []
        for subject, doc in sorted(by_subject.items()):
            resp_path = response_dir / f"{subject}.jsonl"
            if not resp_path.exists():
                continue
            token_lengths = {
                r["conv_id"]: r["token_length"] for r in _read_jsonl(resp_path)
            }
            for s in doc["scores"]:
                if s["conv_id"] in token_lengths:
                    lengths.append(token_lengths[s["conv_id"]])
                    values.append(s["score"])
        if len(lengths) >= 3:
            try:
                check = stats_mod.verbosity_check(lengths, values)
            except stats_mod.StatsError:
                continue
            out[variant] = {"r": check.r, "p": check.p, "n": check.n}
    return out


def format_report(report: dict[str, Any]) -> str:
    lines = ["benchmark scores", "----------------"]
    for subject, by_variant in sorted(report["subjects"].items()):
        for variant, doc in sorted(by_variant.items()):
            lines.append(
                f"{subject:32s} {variant:18s} "
                f"theta={doc['theta']:.4f} ci=[{doc['ci_low']:.4f}, {doc['ci_high']:.4f}]"
            )
    if report["correlations"]:
        lines += ["", "rank correlations vs reference", "------------------------------"]
        for key, rc in sorted(report["correlations"].items()):
            lines.append(
                f"{key:42s} rho={rc['rho']:.3f} (p={rc['p_rho']:.3f})  "
                f"tau={rc['tau']:.3f} (p={rc['p_tau']:.3f})  n={rc['n']}"
            )
    if report.get("verbosity"):
        lines += ["", "verbosity check", "---------------"]
        for variant, vc in sorted(report["verbosity"].items()):
            lines.append(f"{variant:18s} r={vc['r']:+.3f} (p={vc['p']:.3f}, n={vc['n']})")
    for notice in report["notices"]:
        lines.append(f"note: {notice}")
    return "\n".join(lines) + "\n"
