"""LLM-driven pipeline stages: domain confirmation, instruction synthesis and
filtering, feedback identification, and checklist generation.

Each stage is one templated gateway call per conversation.  Model output that
violates the data invariants (feedback ids pointing at assistant turns,
checklist tags referencing unlisted feedback) is sanitized rather than
rejected: offending pieces are dropped and logged, which preserves yield on
noisy output while keeping every emitted record invariant-clean.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any

from .corpus import Conversation
from .gateway import CompletionRequest, Gateway, GatewayError

logger = logging.getLogger(__name__)

REJECTION_REASONS = ("missing_information", "vague_or_ambiguous")

# "[I] question" or "[F12] question", optionally behind a list marker.
_ITEM_RE = re.compile(r"^\s*(?:[-*•]\s*|\d+[.)]\s*)?\[(I|F(\d+))\]\s*(.+?)\s*$")


class SynthesisError(Exception):
    """A stage could not produce a usable record for a conversation."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class SynthesizedInstruction:
    conv_id: str
    text: str
    valid: bool | None = None
    rejection_reason: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            self.text = ""
            self.valid = False
        if self.valid is True:
            self.rejection_reason = None

    def to_record(self) -> dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "text": self.text,
            "valid": self.valid,
            "rejection_reason": self.rejection_reason,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "SynthesizedInstruction":
        return cls(
            conv_id=rec["conv_id"],
            text=rec["text"],
            valid=rec["valid"],
            rejection_reason=rec.get("rejection_reason"),
        )


@dataclass
class FeedbackAnnotation:
    conv_id: str
    positive_ids: set[int] = field(default_factory=set)
    negative_ids: set[int] = field(default_factory=set)

    @property
    def all_ids(self) -> set[int]:
        return self.positive_ids | self.negative_ids

    @property
    def empty(self) -> bool:
        return not self.all_ids

    def to_record(self) -> dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "positive_ids": sorted(self.positive_ids),
            "negative_ids": sorted(self.negative_ids),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "FeedbackAnnotation":
        return cls(
            conv_id=rec["conv_id"],
            positive_ids=set(rec["positive_ids"]),
            negative_ids=set(rec["negative_ids"]),
        )


@dataclass
class ChecklistItem:
    item_id: int
    question: str
    source: str  # "instruction" | "feedback"
    feedback_id: int | None = None

    @property
    def tag(self) -> str:
        return "[I]" if self.source == "instruction" else f"[F{self.feedback_id}]"

    def to_record(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "question": self.question,
            "source": self.source,
            "feedback_id": self.feedback_id,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ChecklistItem":
        return cls(
            item_id=int(rec["item_id"]),
            question=rec["question"],
            source=rec["source"],
            feedback_id=rec.get("feedback_id"),
        )


@dataclass
class Checklist:
    conv_id: str
    instruction_text: str
    items: list[ChecklistItem]

    def feedback_items(self) -> list[ChecklistItem]:
        return [i for i in self.items if i.source == "feedback"]

    def instruction_items(self) -> list[ChecklistItem]:
        return [i for i in self.items if i.source == "instruction"]

    def to_record(self) -> dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "instruction_text": self.instruction_text,
            "items": [i.to_record() for i in self.items],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Checklist":
        return cls(
            conv_id=rec["conv_id"],
            instruction_text=rec["instruction_text"],
            items=[ChecklistItem.from_record(i) for i in rec["items"]],
        )


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def render_conversation(conv: Conversation) -> str:
    """Flatten a dialogue for prompt insertion, keeping message ids visible
    so the model can cite them as feedback sources."""
    return "\n".join(f"[{m.id}] {m.role}: {m.text}" for m in conv.messages)


def _normalize_reason(raw: str | None) -> str:
    if raw is None:
        return "vague_or_ambiguous"
    slug = raw.strip().lower().replace(" ", "_").replace("-", "_")
    if slug in REJECTION_REASONS:
        return slug
    if "missing" in slug:
        return "missing_information"
    logger.debug("unrecognized rejection reason %r; using vague_or_ambiguous", raw)
    return "vague_or_ambiguous"


def parse_checklist_items(
    lines: list[str], fb: FeedbackAnnotation
) -> list[ChecklistItem]:
    """Parse tagged checklist lines, dropping anything off-grammar.

    Feedback tags must cite an id present in the annotation; everything else
    is discarded with a warning (the solely-from-instruction rule when the
    annotation is empty falls out of that check).
    """
    items: list[ChecklistItem] = []
    for line in lines:
        match = _ITEM_RE.match(line)
        if not match:
            logger.warning("dropping unparseable checklist line: %r", line)
            continue
        tag, fb_id, question = match.group(1), match.group(2), match.group(3)
        question = question.strip()
        if not question:
            logger.warning("dropping empty checklist question: %r", line)
            continue
        if not question.endswith("?"):
            question += "?"
        if fb_id is None:
            items.append(ChecklistItem(len(items), question, "instruction"))
        else:
            fid = int(fb_id)
            if fid not in fb.all_ids:
                logger.warning(
                    "dropping checklist item citing unlisted feedback id %d: %r",
                    fid, line,
                )
                continue
            items.append(ChecklistItem(len(items), question, "feedback", fid))
    return items


def subset_instructions_only(cl: Checklist) -> Checklist:
    """The Instructions-Only variant: keep only instruction-derived items,
    order and item ids preserved.  An empty result means the conversation is
    excluded from this variant (callers must check)."""
    kept = [i for i in cl.items if i.source == "instruction"]
    if not kept:
        logger.warning("checklist %s has no instruction-derived items", cl.conv_id)
    return Checklist(conv_id=cl.conv_id, instruction_text=cl.instruction_text, items=kept)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


class Synthesizer:
    """Runs the per-conversation LLM stages through a gateway."""

    def __init__(self, gateway: Gateway, model_id: str, max_attempts: int = 3):
        self.gateway = gateway
        self.model_id = model_id
        self.max_attempts = max_attempts

    def _complete(self, template_id: str, variables: dict[str, str], validate=None):
        return self.gateway.complete(
            CompletionRequest(
                template_id=template_id,
                variables=variables,
                model_id=self.model_id,
                temperature=0.0,
                max_attempts=self.max_attempts,
            ),
            validate=validate,
        )

    def classify_domain(self, conv: Conversation) -> bool:
        """Binary in-domain decision from the first user message only."""
        response = self._complete(
            "domain_classify", {"first_message": conv.first_user_text}
        )
        return bool(response.parsed["is_programming_related"])

    def synthesize_instruction(self, conv: Conversation) -> SynthesizedInstruction:
        """Consolidate the user's full request across the dialogue.

        An empty string is a legitimate model answer (no coding request
        found) and yields an invalid instruction.
        """
        response = self._complete(
            "extract_instruction", {"conversation": render_conversation(conv)}
        )
        return SynthesizedInstruction(conv_id=conv.conv_id, text=response.parsed["instruction"])

    def filter_instruction(self, instr: SynthesizedInstruction) -> SynthesizedInstruction:
        """Populate the validity flag; invalid instructions carry a reason."""
        if not instr.text:
            raise SynthesisError(f"{instr.conv_id}: cannot filter an empty instruction")
        response = self._complete("filter_instruction", {"instruction": instr.text})
        valid = bool(response.parsed["valid"])
        return SynthesizedInstruction(
            conv_id=instr.conv_id,
            text=instr.text,
            valid=valid,
            rejection_reason=None if valid else _normalize_reason(response.parsed.get("reason")),
        )

    def identify_feedback(self, conv: Conversation) -> FeedbackAnnotation:
        """Find user messages reacting to assistant replies.

        Ids the model emits that are not user messages, that point at the
        first message, or that appear in both polarity sets are dropped.
        """
        if len(conv.messages) <= 2:
            # No user message after an assistant reply can exist.
            return FeedbackAnnotation(conv_id=conv.conv_id)
        try:
            response = self._complete(
                "identify_feedback", {"conversation": render_conversation(conv)}
            )
        except GatewayError as exc:
            logger.warning(
                "feedback stage failed for %s (%s); using empty annotation",
                conv.conv_id, exc,
            )
            return FeedbackAnnotation(conv_id=conv.conv_id)

        user_ids = conv.user_message_ids()
        positive = set(response.parsed["positive_feedback_ids"])
        negative = set(response.parsed["negative_feedback_ids"])
        overlap = positive & negative
        if overlap:
            logger.warning("%s: ids %s in both polarities; dropped", conv.conv_id, sorted(overlap))
        cleaned = []
        for ids in (positive, negative):
            keep = {
                i for i in ids
                if i in user_ids and i != 0 and i not in overlap
            }
            dropped = ids - keep
            if dropped - overlap:
                logger.warning(
                    "%s: dropped non-feedback-eligible ids %s",
                    conv.conv_id, sorted(dropped - overlap),
                )
            cleaned.append(keep)
        return FeedbackAnnotation(
            conv_id=conv.conv_id, positive_ids=cleaned[0], negative_ids=cleaned[1]
        )

    def generate_checklist(
        self,
        conv: Conversation,
        instr: SynthesizedInstruction,
        fb: FeedbackAnnotation,
    ) -> Checklist:
        """Produce the tagged requirement checklist for a valid instruction."""
        if instr.valid is not True:
            raise SynthesisError(f"{conv.conv_id}: checklist requires a valid instruction")
        response = self._complete(
            "generate_checklist",
            {
                "conversation": render_conversation(conv),
                "instruction": instr.text,
                "positive_feedback_ids": json.dumps(sorted(fb.positive_ids)),
                "negative_feedback_ids": json.dumps(sorted(fb.negative_ids)),
            },
        )
        items = parse_checklist_items(response.parsed["checklist"], fb)
        if not items:
            raise SynthesisError(f"{conv.conv_id}: no parseable checklist items")
        return Checklist(conv_id=conv.conv_id, instruction_text=instr.text, items=items)
