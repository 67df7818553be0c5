"""Generate subject-model responses and collect binary judge verdicts.

The judge sees only the response text and the checklist questions, one call
per (response, checklist) pair.  Variant checklists are judged in separate
calls rather than by filtering full-variant verdicts, since the judge's
context differs between variants.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .gateway import CompletionRequest, Gateway, GatewayError
from .synthesis import Checklist, SynthesizedInstruction, subset_instructions_only

logger = logging.getLogger(__name__)

VARIANTS = ("full", "instructions_only")

DEGRADED_EXCLUSION_FRACTION = 0.2


class JudgingError(Exception):
    pass


@dataclass
class SubjectResponse:
    conv_id: str
    subject_model_id: str
    text: str
    token_length: int

    @classmethod
    def from_text(cls, conv_id: str, subject_model_id: str, text: str,
                  provider_tokens: int = 0) -> "SubjectResponse":
        # Provider-reported counts win; whitespace tokens otherwise.
        length = provider_tokens if provider_tokens > 0 else len(text.split())
        return cls(conv_id, subject_model_id, text, length)

    def to_record(self) -> dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "subject_model_id": self.subject_model_id,
            "text": self.text,
            "token_length": self.token_length,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "SubjectResponse":
        return cls(rec["conv_id"], rec["subject_model_id"], rec["text"], rec["token_length"])


@dataclass
class VerdictVector:
    conv_id: str
    judge_model_id: str
    variant: str
    verdicts: list[bool]  # aligned with the variant checklist's items


@dataclass
class VerdictTable:
    subject_model_id: str
    judge_model_id: str
    variant: str
    rows: dict[str, VerdictVector] = field(default_factory=dict)
    item_meta: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    exclusions: list[tuple[str, str]] = field(default_factory=list)
    degraded: bool = False

    def add_row(self, vector: VerdictVector, checklist: Checklist) -> None:
        if vector.conv_id in self.rows:
            raise JudgingError(f"duplicate row for conversation {vector.conv_id}")
        if len(vector.verdicts) != len(checklist.items):
            raise JudgingError(
                f"{vector.conv_id}: {len(vector.verdicts)} verdicts for "
                f"{len(checklist.items)} items"
            )
        self.rows[vector.conv_id] = vector
        self.item_meta[vector.conv_id] = [
            {"item_id": item.item_id, "tag": item.tag, "source": item.source}
            for item in checklist.items
        ]

    def save(self, path: str | Path) -> None:
        """Flattened form: one line per (conversation, item) verdict."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for conv_id in sorted(self.rows):
                vec = self.rows[conv_id]
                for meta, verdict in zip(self.item_meta[conv_id], vec.verdicts):
                    fh.write(json.dumps({
                        "conv_id": conv_id,
                        "item_id": meta["item_id"],
                        "verdict": verdict,
                        "source": meta["tag"],
                        "subject_model_id": self.subject_model_id,
                        "judge_model_id": self.judge_model_id,
                        "variant": self.variant,
                    }) + "\n")
            for conv_id, reason in self.exclusions:
                fh.write(json.dumps({
                    "conv_id": conv_id,
                    "excluded": reason,
                    "subject_model_id": self.subject_model_id,
                    "judge_model_id": self.judge_model_id,
                    "variant": self.variant,
                }) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "VerdictTable":
        grouped: dict[str, list[dict[str, Any]]] = {}
        exclusions: list[tuple[str, str]] = []
        header: dict[str, str] = {}
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                header = {
                    "subject": rec["subject_model_id"],
                    "judge": rec["judge_model_id"],
                    "variant": rec["variant"],
                }
                if "excluded" in rec:
                    exclusions.append((rec["conv_id"], rec["excluded"]))
                else:
                    grouped.setdefault(rec["conv_id"], []).append(rec)
        if not header:
            raise JudgingError(f"empty verdict table file: {path}")
        table = cls(
            subject_model_id=header["subject"],
            judge_model_id=header["judge"],
            variant=header["variant"],
            exclusions=exclusions,
        )
        for conv_id, recs in grouped.items():
            recs.sort(key=lambda r: r["item_id"])
            table.rows[conv_id] = VerdictVector(
                conv_id=conv_id,
                judge_model_id=header["judge"],
                variant=header["variant"],
                verdicts=[bool(r["verdict"]) for r in recs],
            )
            table.item_meta[conv_id] = [
                {"item_id": r["item_id"], "tag": r["source"],
                 "source": "instruction" if r["source"] == "[I]" else "feedback"}
                for r in recs
            ]
        return table


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def format_checklist(cl: Checklist) -> str:
    """Numbered questions only; provenance tags stay out of the judge's view."""
    return "\n".join(f"{i + 1}. {item.question}" for i, item in enumerate(cl.items))


def generate_response(
    gateway: Gateway,
    instr: SynthesizedInstruction,
    subject_model_id: str,
    max_attempts: int = 3,
) -> SubjectResponse:
    """Ask the subject model to answer a synthesized instruction.

    The text is stored verbatim; empty responses are kept (a subject that
    fails to answer is signal, and gets judged like everything else).
    """
    if instr.valid is not True:
        raise JudgingError(f"{instr.conv_id}: only valid instructions are evaluated")
    response = gateway.complete(
        CompletionRequest(
            template_id="subject_answer",
            variables={"instruction": instr.text},
            model_id=subject_model_id,
            temperature=0.0,
            max_attempts=max_attempts,
        )
    )
    return SubjectResponse.from_text(
        conv_id=instr.conv_id,
        subject_model_id=subject_model_id,
        text=response.parsed["text"],
        provider_tokens=response.usage.completion_tokens if not response.cached else 0,
    )


def judge(
    gateway: Gateway,
    resp: SubjectResponse,
    cl: Checklist,
    judge_model_id: str,
    variant: str = "full",
    max_attempts: int = 3,
) -> VerdictVector:
    """One boolean per checklist item, aligned with checklist order.

    Replies with the wrong number of answers are retried through the
    gateway; a persistent arity mismatch fails this row.
    """
    if not cl.items:
        raise JudgingError(f"{cl.conv_id}: cannot judge an empty checklist")

    expected = len(cl.items)

    def _arity(parsed: dict[str, Any]) -> str | None:
        got = len(parsed["answers"])
        if got != expected:
            return f"expected {expected} answers, got {got}"
        return None

    response = gateway.complete(
        CompletionRequest(
            template_id="judge_checklist",
            variables={"code": resp.text, "checklist": format_checklist(cl)},
            model_id=judge_model_id,
            temperature=0.0,
            max_attempts=max_attempts,
        ),
        validate=_arity,
    )
    return VerdictVector(
        conv_id=cl.conv_id,
        judge_model_id=judge_model_id,
        variant=variant,
        verdicts=[bool(a) for a in response.parsed["answers"]],
    )


def run_benchmark(
    gateway: Gateway,
    eval_set: Iterable[tuple[SynthesizedInstruction, Checklist]],
    subject_model_id: str,
    judge_model_id: str,
    variant: str = "full",
    responses: dict[str, SubjectResponse] | None = None,
    max_attempts: int = 3,
) -> tuple[VerdictTable, dict[str, SubjectResponse]]:
    """Evaluate one subject under one judge for one variant.

    Pre-generated responses may be passed in (the two variants share them).
    Returns the verdict table plus the responses used; excluded rows are
    recorded with reasons, and the table is flagged degraded when more than
    20% of rows fall out.
    """
    if variant not in VARIANTS:
        raise JudgingError(f"unknown variant {variant!r} (have {VARIANTS})")
    table = VerdictTable(
        subject_model_id=subject_model_id,
        judge_model_id=judge_model_id,
        variant=variant,
    )
    responses = dict(responses or {})
    total = 0
    for instr, checklist in eval_set:
        total += 1
        cl = checklist if variant == "full" else subset_instructions_only(checklist)
        if not cl.items:
            table.exclusions.append((cl.conv_id, "empty_checklist_for_variant"))
            continue
        try:
            resp = responses.get(instr.conv_id)
            if resp is None:
                resp = generate_response(gateway, instr, subject_model_id, max_attempts)
                responses[instr.conv_id] = resp
            vector = judge(gateway, resp, cl, judge_model_id, variant, max_attempts)
        except GatewayError as exc:
            logger.warning("row %s excluded: %s", instr.conv_id, exc)
            table.exclusions.append((instr.conv_id, f"gateway_failure: {exc}"))
            continue
        table.add_row(vector, cl)

    if total and len(table.exclusions) > DEGRADED_EXCLUSION_FRACTION * total:
        table.degraded = True
        logger.warning(
            "benchmark run degraded: %d of %d rows excluded",
            len(table.exclusions), total,
        )
    return table, responses
